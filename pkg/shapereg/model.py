"""The fitted max-affine function and its Moreau smoothing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from shapereg.problem import NoShape, ProblemInstance, ShapeConstraint
from shapereg.shapes import project_simplex

if TYPE_CHECKING:
    from shapereg.proxalm import KKTReport, SolverState

log = logging.getLogger("shapereg.model")


@dataclass(frozen=True)
class MoreauResult:
    value: float
    gradient: np.ndarray
    prox_point: np.ndarray
    gap: float
    iterations: int
    degraded: bool


@dataclass(frozen=True, eq=False)
class MaxAffineModel:
    """psi(x) = sign * max_j theta_j + <xi_j, x - X_j>.

    theta (n,), xi (n x d) and anchors (n x d, row j is X_j) are on the original
    data scale. sign is -1 for concave fits.
    """

    theta: np.ndarray
    xi: np.ndarray
    anchors: np.ndarray
    shape: ShapeConstraint = field(default_factory=NoShape)
    meta: dict[str, Any] = field(default_factory=dict)
    sign: float = 1.0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        xi = np.asarray(self.xi, dtype=float).reshape(theta.size, -1)
        anchors = np.asarray(self.anchors, dtype=float).reshape(theta.size, -1)
        if xi.shape != anchors.shape:
            raise ValueError("xi and anchors must both be n x d")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "intercepts", theta - np.einsum("nd,nd->n", xi, anchors))

    @property
    def n(self) -> int:
        return self.theta.size

    @property
    def d(self) -> int:
        return self.xi.shape[1]

    @classmethod
    def from_state(cls, problem: ProblemInstance, state: "SolverState", report: "KKTReport", solver: str) -> "MaxAffineModel":
        theta, xi = state.theta, state.xi
        if problem.record is not None:
            theta, xi = problem.record.restore(theta, xi)
        meta = {
            "solver": solver,
            "kkt": report.kkt,
            "pobj": report.pobj,
            "rel_gap": report.rel_gap,
            "outer": report.outer,
            "inner": report.inner,
            "seconds": report.seconds,
            "standardization": problem.record.model_dump() if problem.record is not None else None,
        }
        return cls(theta.copy(), xi.copy(), problem.raw.points.copy(), problem.raw_shape, meta)

    def negated(self) -> "MaxAffineModel":
        return replace(self, sign=-self.sign)

    def _pieces(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.shape[1] != self.d:
            raise ValueError(f"expected points of dimension {self.d}, got {X.shape[1]}")
        return self.intercepts[None, :] + X @ self.xi.T, single

    def evaluate(self, x):
        vals, single = self._pieces(x)
        out = self.sign * vals.max(axis=1)
        return float(out[0]) if single else out

    def subgradient(self, x) -> np.ndarray:
        """xi_j of the maximizing piece; ties go to the smallest j."""
        vals, single = self._pieces(x)
        g = self.sign * self.xi[np.argmax(vals, axis=1)]
        return g[0] if single else g

    def __call__(self, x):
        return self.evaluate(x)

    def moreau_evaluate(self, x, tau: float, *, tol: float = 1e-9, max_iter: int = 20000) -> MoreauResult:
        """Moreau envelope min_y psi(y) + tau/2 ||y - x||^2 through its dual over the simplex.

        The dual  max_{lam in simplex} <c + Xi^T x, lam> - ||Xi lam||^2/(2 tau)  is solved
        by accelerated projected gradient; gap is primal minus dual at the returned point.
        """
        if tau <= 0:
            raise ValueError("tau must be positive")
        x = np.asarray(x, dtype=float).ravel()
        if self.sign < 0:
            res = replace(self, sign=1.0).moreau_evaluate(x, tau, tol=tol, max_iter=max_iter)
            return replace(res, value=-res.value, gradient=-res.gradient)
        c = self.intercepts
        Xi = self.xi.T  # d x n
        lin = c + Xi.T @ x

        def dual(lam):
            g = Xi @ lam
            return float(lin @ lam - g @ g / (2 * tau)), g

        def primal(g):
            y = x - g / tau
            return float(np.max(c + self.xi @ y) + 0.5 * tau * np.sum((y - x) ** 2)), y

        lip = _spectral_norm_sq(Xi) / tau
        lam = np.zeros(self.n)
        lam[int(np.argmax(lin))] = 1.0
        dval, g = dual(lam)
        pval, y = primal(g)
        gap, it = pval - dval, 0
        if lip > 0:
            mom, t = lam.copy(), 1.0
            while gap > tol and it < max_iter:
                it += 1
                grad = lin - Xi.T @ (Xi @ mom) / tau
                lam_next = project_simplex(mom + grad / lip)
                t_next = (1 + math.sqrt(1 + 4 * t * t)) / 2
                mom = lam_next + ((t - 1) / t_next) * (lam_next - lam)
                lam, t = lam_next, t_next
                if it % 10 == 0 or it == max_iter:
                    dval, g = dual(lam)
                    pval, y = primal(g)
                    gap = pval - dval
        degraded = gap > tol
        if degraded:
            log.warning("moreau_degraded", extra={"gap": gap, "iterations": it})
        return MoreauResult(value=dval, gradient=g.copy(), prox_point=y, gap=max(gap, 0.0), iterations=it, degraded=degraded)


def _spectral_norm_sq(M: np.ndarray) -> float:
    """||M||_2^2 from the largest singular value (M is d x n with small d)."""
    if not np.any(M):
        return 0.0
    return float(np.linalg.norm(M, 2)) ** 2
