"""Preconditioned proximal point / augmented Lagrangian method for the estimator QP."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, NamedTuple

import numpy as np
from pydantic import BaseModel

from shapereg.config import ProxALMConfig
from shapereg.errors import IterationLimitError, LineSearchError, ShapeError
from shapereg.model import MaxAffineModel
from shapereg.problem import ActiveSet, ProblemInstance, ShapeConstraint, scan_blocks
from shapereg.shapes import conjugate_rows, dual_restore, project_rows
from shapereg.ssn import SubproblemContext, SubproblemPoint, ssn_solve

log = logging.getLogger("shapereg.proxalm")

Trace = Callable[[dict[str, Any]], None]


@dataclass
class SolverState:
    """Primal-dual iterate; u lives on the rows of `active`."""

    theta: np.ndarray
    xi: np.ndarray
    u: np.ndarray
    v: np.ndarray
    sigma: float
    active: ActiveSet
    outer: int = 0
    inner: int = 0
    degraded: bool = False

    @classmethod
    def initial(cls, problem: ProblemInstance, active: ActiveSet, sigma: float) -> "SolverState":
        """theta = Y with every slope at the point of the gradient set nearest 0."""
        return cls(
            theta=problem.Y.copy(),
            xi=project_rows(problem.shape, np.zeros((problem.n, problem.d))),
            u=np.zeros(active.size),
            v=np.zeros((problem.n, problem.d)),
            sigma=sigma,
            active=active,
        )

    def on(self, active: ActiveSet) -> "SolverState":
        """Same iterate with u carried onto another (larger) row set."""
        if active is self.active:
            return self
        return replace(self, u=self.active.remap(self.u, active), active=active)


class KKTReport(BaseModel):
    kkt: float
    primal_res: float
    dual_res: float
    prox_res: float
    comp_res: float
    pobj: float
    dobj: float
    rel_gap: float
    outer: int = 0
    inner: int = 0
    seconds: float = 0.0
    reduced: bool = False
    active_rows: int = 0


class SolveResult(NamedTuple):
    state: SolverState
    report: KKTReport
    model: MaxAffineModel


def kkt_residual(
    problem: ProblemInstance,
    state: SolverState,
    *,
    full: bool = True,
    block_count: int = 10,
    threads: int = 1,
) -> KKTReport:
    """Relative KKT residual and duality gap of `state`.

    With full=False only the rows of state.active enter the complementarity term
    and the norms of A theta, B xi (R_KKT^I); with full=True every row does and
    u is taken as zero outside I.
    """
    theta, xi, u, v, active = state.theta, state.xi, state.u, state.v, state.active
    Y = problem.Y
    at, bt = active.adjoint(problem, u)
    nu, nv, nth, nxi, ny = (float(np.linalg.norm(a)) for a in (u, v, theta, xi, Y))

    r_primal = float(np.linalg.norm(theta - Y - at)) / (1 + ny + nth + nu)
    r_dual = float(np.linalg.norm(bt + v)) / (1 + nu + nv)
    r_prox = float(np.linalg.norm(xi - project_rows(problem.shape, xi - v))) / (1 + nxi + nv)

    if full or active.is_full:
        def block_sq(a: int, b: int) -> float:
            Z = problem.values_block(theta, xi, a, b)
            R = Z - np.maximum(Z - active.block_u(u, a, b), 0.0)
            return float(np.sum(R * R))

        comp = math.sqrt(sum(scan_blocks(block_sq, problem.n, block_count, threads)))
        na, nb = problem.norm_A(theta), problem.norm_B(xi)
    else:
        z = active.values(problem, theta, xi)
        comp = float(np.linalg.norm(z - np.maximum(z - u, 0.0)))
        na = float(np.linalg.norm(active.values(problem, theta, np.zeros_like(xi))))
        nb = float(np.linalg.norm(active.values(problem, np.zeros_like(theta), xi)))
    r_comp = comp / (1 + na + nb + nu)

    pobj = 0.5 * float(np.sum((theta - Y) ** 2))
    dobj = dual_objective(problem, active, u, v)
    rel_gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj)) if math.isfinite(dobj) else math.inf
    return KKTReport(
        kkt=max(r_primal, r_dual, r_prox, r_comp),
        primal_res=r_primal, dual_res=r_dual, prox_res=r_prox, comp_res=r_comp,
        pobj=pobj, dobj=dobj, rel_gap=rel_gap,
        outer=state.outer, inner=state.inner,
        reduced=not (full or active.is_full), active_rows=active.size,
    )


def dual_objective(problem: ProblemInstance, active: ActiveSet, u: np.ndarray, v: np.ndarray) -> float:
    """-1/2||A^T u||^2 - <Y, A^T u> - p*(-v) at the nearest dual-feasible (u, v)."""
    at, _ = active.adjoint(problem, np.maximum(u, 0.0))
    neg_v = dual_restore(problem.shape, -v)
    return float(-0.5 * (at @ at) - problem.Y @ at - np.sum(conjugate_rows(problem.shape, neg_v)))


def multiplier_update(shape: ShapeConstraint, sigma: float, slack_argument, prox_argument) -> tuple[np.ndarray, np.ndarray]:
    """u+ = -sigma (x - Pi_+(x)) and v+ = -sigma (y - Prox_p(y))."""
    x = np.asarray(slack_argument, dtype=float)
    y = np.asarray(prox_argument, dtype=float)
    single = y.ndim == 1
    Y2 = y[None, :] if single else y
    v = -sigma * (Y2 - project_rows(shape, Y2))
    return -sigma * np.minimum(x, 0.0), (v[0] if single else v)


def sigma_norm(config: ProxALMConfig, dtheta, dxi, du, dv) -> float:
    """||(dtheta, dxi, du, dv)|| in the metric Diag(H1, H2, I, I)."""
    return math.sqrt(
        config.h1 * float(np.sum(dtheta**2)) + config.h2 * float(np.sum(dxi**2))
        + float(np.sum(du**2)) + float(np.sum(dv**2))
    )


class StopChecks(NamedTuple):
    absolute: bool
    relative: bool


def stopping_checks(
    grad_norm: float, step_norm: float, sigma: float, k: int, config: ProxALMConfig
) -> StopChecks:
    """Absolute (summable eps_k) and relative (delta_k times the step) inexactness rules."""
    scale = math.sqrt(config.lambda_min) / sigma
    absolute = grad_norm <= scale * config.eps(k)
    relative = grad_norm <= config.delta(k, step_norm) * scale * step_norm
    return StopChecks(absolute, relative)


def solve(
    problem: ProblemInstance,
    config: ProxALMConfig = ProxALMConfig(),
    *,
    start: SolverState | None = None,
    active: ActiveSet | None = None,
    trace: Trace | None = None,
) -> SolveResult:
    """Run the proximal ALM until R_KKT (over the active rows) <= config.kkt_tol."""
    t0 = time.perf_counter()
    active = active if active is not None else (start.active if start is not None else ActiveSet.full(problem.n))
    if active.n != problem.n:
        raise ShapeError("active set does not match the instance")
    state = start.on(active) if start is not None else SolverState.initial(problem, active, config.sigma0)
    state = replace(state, outer=0, inner=0, degraded=False)
    sigma = state.sigma
    kw = dict(full=False, block_count=config.block_count, threads=config.threads)

    report = kkt_residual(problem, state, **kw)
    prev_pobj = report.pobj
    k = 0
    while report.kkt > config.kkt_tol:
        if k >= config.max_outer:
            report = report.model_copy(update={"seconds": time.perf_counter() - t0})
            raise IterationLimitError(
                f"proximal ALM reached {config.max_outer} outer iterations (R_KKT={report.kkt:.3e})",
                state=state, report=report,
            )
        ctx = SubproblemContext(problem, active, state.theta, state.xi, state.u, state.v, sigma, config.h1, config.h2)

        def stop(pt: SubproblemPoint, gnorm: float, ctx=ctx, k=k) -> bool:
            if gnorm <= math.sqrt(config.lambda_min) / ctx.sigma * config.eps(k):
                return True
            u_new, v_new = multiplier_update(problem.shape, ctx.sigma, pt.z, pt.w)
            step = sigma_norm(config, pt.theta - ctx.theta_c, pt.xi - ctx.xi_c, u_new - ctx.u, v_new - ctx.v)
            return stopping_checks(gnorm, step, ctx.sigma, k, config).relative

        degraded = False
        try:
            res = ssn_solve(ctx, (state.theta, state.xi), stop, config.ssn)
            pt, inner, gnorm, degraded = res.point, res.iterations, res.grad_norm, res.degraded
        except (IterationLimitError, LineSearchError) as exc:
            best = exc.state
            log.warning("ssn_incomplete", extra={"outer": k, "reason": type(exc).__name__})
            pt, inner, gnorm, degraded = best.point, best.iterations, best.grad_norm, True

        u, v = multiplier_update(problem.shape, sigma, pt.z, pt.w)
        state = SolverState(pt.theta, pt.xi, u, v, sigma, active,
                            outer=k + 1, inner=state.inner + inner, degraded=state.degraded or degraded)
        report = kkt_residual(problem, state, **kw)
        if report.pobj > prev_pobj * (1 + 1e-8) + 1e-12 and k > 0:
            log.debug("pobj_increase", extra={"outer": k, "pobj": report.pobj, "prev": prev_pobj})
        prev_pobj = report.pobj
        log.info("proxalm_outer", extra={"outer": k + 1, "sigma": sigma, "inner": inner, "grad_norm": gnorm,
                                         "kkt": report.kkt, "pobj": report.pobj, "rel_gap": report.rel_gap})
        if trace is not None:
            trace({"engine": "proxalm", "outer": k + 1, "sigma": sigma, "inner": inner, "grad_norm": gnorm,
                   "kkt": report.kkt, "pobj": report.pobj, "dobj": report.dobj, "rows": active.size})
        sigma = min(config.sigma_growth * sigma, config.sigma_max)
        state.sigma = sigma
        k += 1

    report = report.model_copy(update={"seconds": time.perf_counter() - t0})
    model = MaxAffineModel.from_state(problem, state, report, solver="proxalm")
    return SolveResult(state, report, model)
