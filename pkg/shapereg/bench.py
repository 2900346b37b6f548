"""Synthetic test functions, seeded data generation and benchmark grids."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from pydantic import BaseModel, Field, model_validator

from shapereg.admm import admm_solve
from shapereg.cgm import cgm_solve
from shapereg.config import ADMMConfig, CGMConfig, Engine, ProxALMConfig
from shapereg.errors import ParameterError, ShapeRegError
from shapereg.io import write_text_atomic
from shapereg.problem import Box, Dataset, LipschitzBall, Monotone, NoShape, ShapeConstraint, build_instance
from shapereg.proxalm import solve

log = logging.getLogger("shapereg.bench")


@dataclass(frozen=True)
class TestFunction:
    """A convex function on R^d with the gradient set it is known to satisfy."""

    __test__ = False  # not a pytest class

    id: str
    d: int
    fn: Callable[[np.ndarray], np.ndarray]
    shape: ShapeConstraint
    params: dict

    def __call__(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float))
        if P.shape[1] != self.d:
            raise ParameterError(f"{self.id} expects points of dimension {self.d}")
        return self.fn(P)


def _spectrum(d: int) -> np.ndarray:
    return np.linspace(0.5, 2.0, d) if d > 1 else np.array([2.0])


def make_function(function_id: str, d: int, seed: int = 0, *, p=None) -> TestFunction:
    """Build a test function; random parameters come from their own stream of `seed`."""
    if d < 1:
        raise ParameterError("d must be positive")
    rng = np.random.default_rng([seed, 1])
    if function_id == "exp_inner":
        p = rng.standard_normal(d) if p is None else np.asarray(p, dtype=float).reshape(d)
        return TestFunction(function_id, d, lambda X: np.exp(X @ p), NoShape(), {"p": p.tolist()})
    if function_id == "relu_sum":
        return TestFunction(function_id, d, lambda X: np.maximum(X.sum(axis=1), 0.0),
                            Monotone(K1=list(range(d))), {})
    if function_id == "softplus_sum":
        return TestFunction(function_id, d, lambda X: np.logaddexp(0.0, X.sum(axis=1)),
                            Box(L=[0.0] * d, U=[1.0] * d), {})
    if function_id == "sqrt_quad_id":
        return TestFunction(function_id, d, lambda X: np.sqrt(1.0 + np.sum(X * X, axis=1)),
                            LipschitzBall(q=math.inf, L=1.0), {})
    if function_id == "sqrt_quad_Q":
        V, _ = np.linalg.qr(rng.standard_normal((d, d)))
        lam = _spectrum(d)
        Q = (V * lam) @ V.T
        Q = (Q + Q.T) / 2
        return TestFunction(function_id, d, lambda X: np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", X, Q, X), 0.0)),
                            LipschitzBall(q=2.0, L=float(lam.max())), {"Q": Q.tolist(), "lambda_max": float(lam.max())})
    if function_id == "logsumexp":
        return TestFunction(function_id, d,
                            lambda X: np.logaddexp.reduce(np.hstack([np.zeros((X.shape[0], 1)), X]), axis=1),
                            LipschitzBall(q=1.0, L=1.0), {})
    if function_id == "maxnorm_quad5":
        return TestFunction(function_id, d, lambda X: 5 * np.abs(X).max(axis=1) + np.sum(X * X, axis=1), NoShape(), {})
    if function_id == "maxnorm_quad2":
        return TestFunction(function_id, d, lambda X: 2 * np.abs(X).max(axis=1) + np.sum(X * X, axis=1), NoShape(), {})
    raise ParameterError(f"unknown test function {function_id!r}")


FUNCTION_IDS = (
    "exp_inner", "relu_sum", "softplus_sum", "sqrt_quad_id", "sqrt_quad_Q", "logsumexp",
    "maxnorm_quad5", "maxnorm_quad2",
)


def evaluate_function(function_id: str, x, seed: int = 0) -> float:
    """psi(x) for a single point."""
    x = np.asarray(x, dtype=float).ravel()
    return float(make_function(function_id, x.size, seed)(x[None, :])[0])


def generate(function_id: str, d: int, n: int, snr: float = 3.0, seed: int = 0) -> tuple[Dataset, TestFunction]:
    """X ~ U[-1, 1]^d; Y = psi(X) + noise with Var(noise) = Var(psi(X)) / snr."""
    if n < 1:
        raise ParameterError("n must be positive")
    if not snr > 0:
        raise ParameterError("snr must be positive")
    f = make_function(function_id, d, seed)
    rng = np.random.default_rng(seed)
    P = rng.uniform(-1.0, 1.0, size=(n, d))
    clean = f(P)
    noise = np.zeros(n)
    if math.isfinite(snr):
        noise = rng.standard_normal(n) * math.sqrt(float(np.var(clean)) / snr)
    return Dataset.from_points(P, clean + noise), f


def mse(model, points, oracle) -> float:
    """Mean squared difference between the model and the oracle (callable or values)."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    truth = oracle(P) if callable(oracle) else np.asarray(oracle, dtype=float)
    return float(np.mean((model.evaluate(P) - truth) ** 2))


class BenchCell(BaseModel):
    function: str
    d: int = Field(ge=1)
    n: int = Field(ge=1)
    engine: Engine = Engine.PROXALM
    tol: float = Field(default=1e-6, gt=0)
    snr: float = Field(default=3.0, gt=0)
    seed: int = Field(default=0, ge=0)
    shape: str = "default"  # "default" uses the function's own gradient set, "none" drops it


class BenchGrid(BaseModel):
    """Explicit cells, or the product functions x d x n x engines."""

    cells: list[BenchCell] = Field(default_factory=list)
    functions: list[str] = Field(default_factory=list)
    d: list[int] = Field(default_factory=list)
    n: list[int] = Field(default_factory=list)
    engines: list[Engine] = Field(default_factory=lambda: [Engine.PROXALM])
    tol: float = Field(default=1e-6, gt=0)
    snr: float = Field(default=3.0, gt=0)
    seed: int = Field(default=0, ge=0)
    shape: str = "default"

    @model_validator(mode="after")
    def check_nonempty(self):
        if not self.cells and not (self.functions and self.d and self.n):
            raise ValueError("grid needs cells or functions, d and n")
        return self

    def expand(self) -> list[BenchCell]:
        if self.cells:
            return list(self.cells)
        return [
            BenchCell(function=f, d=d, n=n, engine=e, tol=self.tol, snr=self.snr, seed=self.seed, shape=self.shape)
            for f, d, n, e in itertools.product(self.functions, self.d, self.n, self.engines)
        ]


class BenchRow(BaseModel):
    function: str
    d: int
    n: int
    shape: str
    engine: str
    tol: float
    seed: int
    status: str
    outer: int = 0
    inner: int = 0
    rounds: int = 0
    kkt: float = math.nan
    objective: float = math.nan
    seconds: float = 0.0


def run_cell(cell: BenchCell) -> BenchRow:
    dataset, f = generate(cell.function, cell.d, cell.n, cell.snr, cell.seed)
    shape = f.shape if cell.shape == "default" else NoShape()
    base = dict(function=cell.function, d=cell.d, n=cell.n, shape=shape.kind, engine=cell.engine.value,
                tol=cell.tol, seed=cell.seed)
    t0 = time.perf_counter()
    try:
        instance = build_instance(dataset, shape)
        rounds = 0
        if cell.engine.uses_cgm:
            inner_cfg = ProxALMConfig() if cell.engine.inner is Engine.PROXALM else ADMMConfig()
            res = cgm_solve(instance, CGMConfig(tol=cell.tol, seed=cell.seed), cell.engine.inner, inner_cfg)
            report, rounds = res.report, len(res.rounds)
        elif cell.engine is Engine.ADMM:
            report = admm_solve(instance, ADMMConfig(kkt_tol=cell.tol)).report
        else:
            report = solve(instance, ProxALMConfig(kkt_tol=cell.tol)).report
    except ShapeRegError as exc:
        log.warning("bench_cell_failed", extra={"function": cell.function, "d": cell.d, "n": cell.n, "reason": str(exc)})
        return BenchRow(**base, status=f"error: {type(exc).__name__}", seconds=time.perf_counter() - t0)
    return BenchRow(**base, status="ok", outer=report.outer, inner=report.inner, rounds=rounds,
                    kkt=report.kkt, objective=report.pobj, seconds=time.perf_counter() - t0)


def run_benchmark(grid: BenchGrid, threads: int = 1) -> list[BenchRow]:
    """Run every cell; rows come back in grid order whatever the thread count."""
    cells = grid.expand()
    if threads <= 1:
        return [run_cell(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_cell, cells))


def report_csv(rows: list[BenchRow], *, timing: bool = False) -> str:
    """CSV text of the rows; wall-clock seconds only when timing is requested."""
    fields = [f for f in BenchRow.model_fields if timing or f != "seconds"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        data = row.model_dump()
        w.writerow([_cell(data[f]) for f in fields])
    return buf.getvalue()


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(rows: list[BenchRow], path: str | Path, *, timing: bool = False) -> Path:
    return write_text_atomic(path, report_csv(rows, timing=timing))
