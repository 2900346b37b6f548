"""Constraint generation: solve on a working set of convexity rows, add the violated
ones found by a blockwise scan, repeat until the full KKT residual is small."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel

from shapereg.admm import admm_solve
from shapereg.config import ADMMConfig, CGMConfig, Engine, ProxALMConfig
from shapereg.errors import IterationLimitError, SolverError
from shapereg.model import MaxAffineModel
from shapereg.problem import ActiveSet, ProblemInstance, scan_blocks
from shapereg.proxalm import KKTReport, SolverState, Trace, kkt_residual, solve

log = logging.getLogger("shapereg.cgm")

# Slack magnitude below which a row counts as active at termination
ACTIVE_SLACK = 1e-6


@dataclass
class WorkingSet:
    active: ActiveSet
    round: int = 0
    history: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.active.size


def initial_working_set(problem: ProblemInstance, config: CGMConfig) -> WorkingSet:
    """Seeded sample of off-diagonal rows, 10n of them (50n when d <= 2) by default."""
    n = problem.n
    size = config.initial_size(n, problem.d)
    if size >= n * (n - 1):
        return WorkingSet(ActiveSet.full(n), history=[n * n])
    rng = np.random.default_rng(config.seed)
    m = rng.choice(n * (n - 1), size=size, replace=False)
    i, jj = np.divmod(m, n - 1)
    j = jj + (jj >= i)
    active = ActiveSet(n, i * n + j)
    return WorkingSet(active, history=[active.size])


def infeasibility_metrics(problem: ProblemInstance, theta, xi, *, block_count: int = 10, threads: int = 1) -> tuple[float, float]:
    """(||(A theta + B xi)_-|| / n, max |(A theta + B xi)_-|) over all n^2 rows."""
    theta = np.asarray(theta, dtype=float)
    xi = np.asarray(xi, dtype=float).reshape(problem.n, problem.d)

    def block(a: int, b: int) -> tuple[float, float]:
        neg = np.minimum(problem.values_block(theta, xi, a, b), 0.0)
        return float(np.sum(neg * neg)), float(-neg.min(initial=0.0))

    parts = scan_blocks(block, problem.n, block_count, threads)
    sq = sum(p[0] for p in parts)
    return float(np.sqrt(sq)) / problem.n, max(p[1] for p in parts)


def _top_violations(values: np.ndarray, rows: np.ndarray, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """The `cap` most negative slacks, ties broken by the smaller row index."""
    if values.size > cap:
        order = np.lexsort((rows, values))[:cap]
        values, rows = values[order], rows[order]
    return values, rows


def scan_violations(
    problem: ProblemInstance, theta, xi, working: ActiveSet, cap: int, *, block_count: int = 10, threads: int = 1
) -> np.ndarray:
    """Rows outside the working set with negative slack; at most `cap`, most negative first."""
    n = problem.n

    def block(a: int, b: int):
        Z = problem.values_block(theta, xi, a, b)
        hit = Z < 0
        hit &= ~working.block_members(a, b)
        ii, jj = np.nonzero(hit)
        keep = ii + a != jj
        ii, jj = ii[keep], jj[keep]
        return _top_violations(Z[ii, jj], (ii + a).astype(np.int64) * n + jj, cap)

    parts = scan_blocks(block, n, block_count, threads)
    values = np.concatenate([p[0] for p in parts]) if parts else np.empty(0)
    rows = np.concatenate([p[1] for p in parts]) if parts else np.empty(0, dtype=np.int64)
    return np.sort(_top_violations(values, rows, cap)[1])


class RoundReport(BaseModel):
    round: int
    working_rows: int
    added_rows: int
    kkt_reduced: float
    kkt_full: float
    pinfeas: float
    viotol: float
    time_cgm: float
    time_solver: float
    time_opt: float
    termination_check: bool | None = None


class CGMResult(NamedTuple):
    state: SolverState
    report: KKTReport
    rounds: list[RoundReport]
    model: MaxAffineModel


def _run_inner(problem, engine: Engine, config, start, active, trace):
    if engine is Engine.ADMM:
        return admm_solve(problem, config, start=start, active=active, trace=trace)
    return solve(problem, config, start=start, active=active, trace=trace)


def cgm_solve(
    problem: ProblemInstance,
    config: CGMConfig = CGMConfig(),
    inner: Engine | str = Engine.PROXALM,
    inner_config: ProxALMConfig | ADMMConfig | None = None,
    *,
    trace: Trace | None = None,
) -> CGMResult:
    """Constraint generation around proximal ALM or sGS-ADMM; round 0 starts cold."""
    inner = Engine(inner).inner
    if inner_config is None:
        inner_config = ProxALMConfig() if inner is Engine.PROXALM else ADMMConfig()
    inner_config = inner_config.model_copy(update={"kkt_tol": config.tol})
    kw = dict(block_count=config.block_count, threads=config.threads)

    t0 = time.perf_counter()
    ws = initial_working_set(problem, config)
    rounds: list[RoundReport] = []
    start: SolverState | None = None
    added = ws.size
    t_gen = time.perf_counter() - t0
    prev_violation = None

    while True:
        t1 = time.perf_counter()
        try:
            result = _run_inner(problem, inner, inner_config, start, ws.active, trace)
            if result.state.degraded and start is not None:
                log.warning("cgm_round_rerun", extra={"round": ws.round})
                reset = replace(start.on(ws.active), sigma=inner_config.sigma0)
                result = _run_inner(problem, inner, inner_config, reset, ws.active, trace)
        except SolverError as exc:
            raise SolverError(f"constraint generation round {ws.round} failed: {exc}", state=exc.state, report=exc.report) from exc
        t_solver = time.perf_counter() - t1

        t2 = time.perf_counter()
        state, reduced = result.state, result.report
        full = kkt_residual(problem, state, full=True, **kw)
        pinfeas, viotol = infeasibility_metrics(problem, state.theta, state.xi, **kw)
        done = full.kkt <= config.tol or ws.active.is_full
        new_rows = np.empty(0, dtype=np.int64)
        if not done:
            new_rows = scan_violations(problem, state.theta, state.xi, ws.active, ws.size, **kw)
        t_opt = time.perf_counter() - t2

        check = None
        if new_rows.size == 0:
            # no violated rows left: the full residual meets the tolerance or the reduced one
            check = full.kkt <= max(config.tol, reduced.kkt * (1 + 1e-8) + 1e-14)
            if not check:
                log.warning("cgm_termination_check", extra={"kkt_full": full.kkt, "kkt_reduced": reduced.kkt})
        if prev_violation is not None and viotol > prev_violation * (1 + 1e-8) + 1e-12:
            log.warning("cgm_violation_increase", extra={"round": ws.round, "viotol": viotol, "prev": prev_violation})
        prev_violation = viotol

        row = RoundReport(
            round=ws.round, working_rows=ws.size, added_rows=added,
            kkt_reduced=reduced.kkt, kkt_full=full.kkt, pinfeas=pinfeas, viotol=viotol,
            time_cgm=t_gen, time_solver=t_solver, time_opt=t_opt, termination_check=check,
        )
        rounds.append(row)
        log.info("cgm_round", extra=row.model_dump(exclude={"termination_check"}))
        if trace is not None:
            trace({"engine": "cgm", **row.model_dump()})

        if done or new_rows.size == 0:
            break
        if ws.round + 1 >= config.max_rounds:
            raise IterationLimitError(
                f"constraint generation reached {config.max_rounds} rounds (R_KKT={full.kkt:.3e})",
                state=state, report=full,
            )
        t3 = time.perf_counter()
        grown = ws.active.union(new_rows)
        ws = WorkingSet(grown, ws.round + 1, ws.history + [grown.size])
        start = state.on(grown)
        added = int(new_rows.size)
        t_gen = time.perf_counter() - t3

    full = full.model_copy(update={"seconds": time.perf_counter() - t0, "outer": reduced.outer, "inner": reduced.inner})
    counts = scan_blocks(
        lambda a, b: int(np.sum(np.abs(problem.values_block(state.theta, state.xi, a, b)) <= ACTIVE_SLACK)),
        problem.n, config.block_count, config.threads,
    )
    n_active = sum(counts) - problem.n
    if n_active > problem.n * (problem.d + 1) + problem.n:
        log.warning("cgm_active_rows_high", extra={"active": n_active, "bound": problem.n * (problem.d + 2)})
    model = MaxAffineModel.from_state(problem, state, full, solver=f"cgm-{inner.value}")
    return CGMResult(state, full, rounds, model)
