"""Support functions, projections and generalized Jacobians of the gradient sets.

Every batched routine takes an n x d array whose row i is constrained by
`shape.block(i)`; the single-vector forms wrap the batched ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from shapereg.errors import ShapeError
from shapereg.problem import Box, LipschitzBall, Monotone, NoShape, PerPointBall, ShapeConstraint


def dual_exponent(q: float) -> float:
    """p with 1/p + 1/q = 1 for q in {1, 2, inf}."""
    return {1.0: math.inf, 2.0: 2.0, math.inf: 1.0}[float(q)]


def _radii(shape: LipschitzBall | PerPointBall, n: int) -> np.ndarray:
    if isinstance(shape, LipschitzBall):
        return np.full(n, shape.L)
    if len(shape.L) != n:
        raise ShapeError(f"per-point radii has {len(shape.L)} entries for {n} blocks")
    return np.asarray(shape.L, dtype=float)


def _as_rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


# ----- Jacobian elements -----

@dataclass(frozen=True)
class Identity:
    def matvec(self, h: np.ndarray) -> np.ndarray:
        return h

    def to_dense(self, d: int) -> np.ndarray:
        return np.eye(d)


@dataclass(frozen=True)
class DiagMask:
    """Diag(u) with u in [0, 1]^d."""

    u: np.ndarray

    def matvec(self, h: np.ndarray) -> np.ndarray:
        return self.u * h

    def to_dense(self, d: int) -> np.ndarray:
        return np.diag(self.u)


@dataclass(frozen=True)
class Ball2:
    """scale * I - coef * v v^T."""

    scale: float
    vec: np.ndarray
    coef: float

    def matvec(self, h: np.ndarray) -> np.ndarray:
        return self.scale * h - self.coef * self.vec * float(self.vec @ h)

    def to_dense(self, d: int) -> np.ndarray:
        return self.scale * np.eye(d) - self.coef * np.outer(self.vec, self.vec)


@dataclass(frozen=True)
class Ball1:
    """P (Diag(r) - r r^T / nnz(r)) P with P = Diag(sign)."""

    sign: np.ndarray
    r: np.ndarray

    def matvec(self, h: np.ndarray) -> np.ndarray:
        y = self.sign * h
        z = self.r * y - self.r * float(self.r @ y) / self.r.sum()
        return self.sign * z

    def to_dense(self, d: int) -> np.ndarray:
        M = np.diag(self.r) - np.outer(self.r, self.r) / self.r.sum()
        return self.sign[:, None] * M * self.sign[None, :]


JacobianElement = Union[Identity, DiagMask, Ball2, Ball1]


@dataclass(frozen=True)
class JacobianBlocks:
    """One generalized Jacobian element per row, stored in batched form.

    kind "diag": `diag` holds u (n x d). kind "ball2": scale (n,), coef (n,), vec (n x d).
    kind "ball1": sign, r (n x d), nnz (n,) and `inside` rows that act as the identity.
    """

    kind: Literal["identity", "diag", "ball2", "ball1"]
    n: int
    d: int
    diag: np.ndarray | None = None
    scale: np.ndarray | None = None
    coef: np.ndarray | None = None
    vec: np.ndarray | None = None
    sign: np.ndarray | None = None
    r: np.ndarray | None = None
    nnz: np.ndarray | None = None
    inside: np.ndarray | None = None

    def matvec(self, H: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return H
        if self.kind == "diag":
            return self.diag * H
        if self.kind == "ball2":
            return self.scale[:, None] * H - (self.coef * np.einsum("nd,nd->n", self.vec, H))[:, None] * self.vec
        y = self.sign * H
        ry = np.einsum("nd,nd->n", self.r, y)
        z = self.r * y - self.r * (ry / np.maximum(self.nnz, 1))[:, None]
        return np.where(self.inside[:, None], H, self.sign * z)

    def diagonal(self) -> np.ndarray:
        if self.kind == "identity":
            return np.ones((self.n, self.d))
        if self.kind == "diag":
            return self.diag
        if self.kind == "ball2":
            return self.scale[:, None] - self.coef[:, None] * self.vec**2
        diag = self.r * (1.0 - 1.0 / np.maximum(self.nnz, 1))[:, None]
        return np.where(self.inside[:, None], 1.0, diag)

    def dense(self) -> np.ndarray:
        """n x d x d stack of the blocks."""
        eye = np.broadcast_to(np.eye(self.d), (self.n, self.d, self.d))
        if self.kind == "identity":
            return eye.copy()
        if self.kind == "diag":
            return eye * self.diag[:, None, :]
        if self.kind == "ball2":
            return self.scale[:, None, None] * eye - self.coef[:, None, None] * np.einsum("ni,nj->nij", self.vec, self.vec)
        M = eye * self.r[:, None, :] - np.einsum("ni,nj->nij", self.r, self.r) / np.maximum(self.nnz, 1)[:, None, None]
        M = self.sign[:, :, None] * M * self.sign[:, None, :]
        return np.where(self.inside[:, None, None], eye, M)

    def block(self, i: int) -> JacobianElement:
        if self.kind == "identity":
            return Identity()
        if self.kind == "diag":
            return DiagMask(self.diag[i].copy())
        if self.kind == "ball2":
            return Ball2(float(self.scale[i]), self.vec[i].copy(), float(self.coef[i]))
        if self.inside[i]:
            return Identity()
        return Ball1(self.sign[i].copy(), self.r[i].copy())


# ----- projections -----

def project_simplex(x) -> np.ndarray:
    """Euclidean projection onto {z >= 0, sum z = 1} by sorting."""
    return _simplex_rows(np.atleast_2d(np.asarray(x, dtype=float)))[0]


def _simplex_rows(W: np.ndarray) -> np.ndarray:
    m = W.shape[1]
    srt = -np.sort(-W, axis=1)
    css = np.cumsum(srt, axis=1) - 1.0
    ks = np.arange(1, m + 1)
    cond = srt - css / ks > 0
    rho = cond.sum(axis=1)
    t = css[np.arange(W.shape[0]), rho - 1] / rho
    return np.maximum(W - t[:, None], 0.0)


def _project(shape: ShapeConstraint, Z: np.ndarray, jacobian: bool) -> tuple[np.ndarray, JacobianBlocks | None]:
    n, d = Z.shape
    if isinstance(shape, NoShape):
        return Z.copy(), JacobianBlocks("identity", n, d) if jacobian else None

    if isinstance(shape, Monotone):
        s = shape.signs(d)
        if len(s) != d:
            raise ShapeError("monotone signs do not match d")
        out = np.where(s > 0, np.maximum(Z, 0.0), np.where(s < 0, np.minimum(Z, 0.0), Z))
        if not jacobian:
            return out, None
        u = np.where(s > 0, Z >= 0, np.where(s < 0, Z <= 0, True)).astype(float)
        return out, JacobianBlocks("diag", n, d, diag=u)

    if isinstance(shape, Box):
        lo, hi = shape.lower, shape.upper
        if lo.size != d:
            raise ShapeError(f"box has {lo.size} bounds for d={d}")
        out = np.clip(Z, lo, hi)
        if not jacobian:
            return out, None
        return out, JacobianBlocks("diag", n, d, diag=((Z >= lo) & (Z <= hi)).astype(float))

    if isinstance(shape, (LipschitzBall, PerPointBall)):
        L = _radii(shape, n)
        if shape.q == math.inf:
            out = np.clip(Z, -L[:, None], L[:, None])
            if not jacobian:
                return out, None
            return out, JacobianBlocks("diag", n, d, diag=(np.abs(Z) <= L[:, None]).astype(float))
        if shape.q == 2.0:
            return _project_l2(Z, L, jacobian)
        return _project_l1(Z, L, jacobian)

    raise ShapeError(f"unsupported shape {shape!r}")


def _project_l2(Z: np.ndarray, L: np.ndarray, jacobian: bool):
    n, d = Z.shape
    norms = np.linalg.norm(Z, axis=1)
    outside = norms > L
    scale = np.ones(n)
    scale[outside] = L[outside] / norms[outside]
    out = Z * scale[:, None]
    if not jacobian:
        return out, None
    # on the sphere the identity element is used
    coef = np.zeros(n)
    coef[outside] = scale[outside] / norms[outside] ** 2
    return out, JacobianBlocks("ball2", n, d, scale=scale, coef=coef, vec=Z.copy())


def _project_l1(Z: np.ndarray, L: np.ndarray, jacobian: bool):
    n, d = Z.shape
    absZ = np.abs(Z)
    outside = absZ.sum(axis=1) > L
    out = Z.copy()
    sign = np.sign(Z)
    r = np.ones((n, d))
    if outside.any():
        S = _simplex_rows(absZ[outside] / L[outside, None])
        out[outside] = sign[outside] * S * L[outside, None]
        r[outside] = (S > 0).astype(float)
    if not jacobian:
        return out, None
    return out, JacobianBlocks("ball1", n, d, sign=sign, r=r, nnz=r.sum(axis=1), inside=~outside)


def project_rows(shape: ShapeConstraint, Z) -> np.ndarray:
    return _project(shape, np.asarray(Z, dtype=float), False)[0]


def jacobian_rows(shape: ShapeConstraint, Z) -> JacobianBlocks:
    return _project(shape, np.asarray(Z, dtype=float), True)[1]


def prox_p(shape: ShapeConstraint, xi) -> tuple[np.ndarray, JacobianBlocks]:
    """Blockwise projection of xi (n x d) and the Jacobian element at xi."""
    return _project(shape, np.asarray(xi, dtype=float), True)


def _single(shape: ShapeConstraint, index: int | None) -> ShapeConstraint:
    """The set for one block: block `index` of shape, or shape itself when it is shared."""
    if index is not None:
        return shape.block(index)
    if isinstance(shape, PerPointBall) and len(shape.L) != 1:
        raise ShapeError("per-point radii need the block index of a single vector")
    return shape


def project(shape: ShapeConstraint, x, index: int | None = None) -> np.ndarray:
    Z, single = _as_rows(x)
    out = project_rows(_single(shape, index) if single else shape, Z)
    return out[0] if single else out


def jacobian_element(shape: ShapeConstraint, x, index: int | None = None) -> JacobianElement:
    Z, _ = _as_rows(x)
    return jacobian_rows(_single(shape, index), Z[:1]).block(0)


# ----- support functions -----

def conjugate_rows(shape: ShapeConstraint, Z) -> np.ndarray:
    """delta*_D(z_i) for every row; +inf where the support function is infinite."""
    Z = np.asarray(Z, dtype=float)
    n, d = Z.shape
    if isinstance(shape, NoShape):
        return np.where(np.all(Z == 0, axis=1), 0.0, math.inf)
    if isinstance(shape, Monotone):
        s = shape.signs(d)
        bad = np.where(s > 0, Z > 0, np.where(s < 0, Z < 0, Z != 0))
        return np.where(bad.any(axis=1), math.inf, 0.0)
    if isinstance(shape, Box):
        with np.errstate(invalid="ignore"):
            pos = np.where(Z > 0, shape.upper * Z, 0.0)
            neg = np.where(Z < 0, shape.lower * Z, 0.0)
        return (pos + neg).sum(axis=1)
    if isinstance(shape, (LipschitzBall, PerPointBall)):
        return _radii(shape, n) * np.linalg.norm(Z, ord=dual_exponent(shape.q), axis=1)
    raise ShapeError(f"unsupported shape {shape!r}")


def conjugate(shape: ShapeConstraint, x, index: int | None = None) -> float:
    Z, single = _as_rows(x)
    vals = conjugate_rows(_single(shape, index) if single else shape, Z)
    return float(vals[0]) if single else float(vals.sum())


def dual_restore(shape: ShapeConstraint, Z) -> np.ndarray:
    """Nearest point of Z in the domain of the support function.

    Only the cone-shaped sets have a restricted domain: its polar cone, reached by
    the Moreau decomposition Z - Pi_D(Z).
    """
    Z = np.asarray(Z, dtype=float)
    if isinstance(shape, NoShape):
        return np.zeros_like(Z)
    if isinstance(shape, Monotone):
        return Z - project_rows(shape, Z)
    return Z
