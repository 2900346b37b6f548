"""Problem data, gradient-set constraints and the implicit convexity operators.

Row k = i*n + j (0-based) of the convexity system is

    theta_j - theta_i + <xi_i, X_i - X_j> >= 0,

so the n^2 slacks of a full evaluation are the C-order ravel of an n x n matrix
whose row i holds block i. Neither A nor B is ever formed.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Annotated, Any, Callable, Iterable, Literal, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_serializer, field_validator, model_validator
from scipy import sparse

from shapereg.errors import DataError, IndexRangeError, SchemaError, ShapeError

log = logging.getLogger("shapereg.problem")

T = TypeVar("T")


# ----- data -----

@dataclass(frozen=True, eq=False)
class Dataset:
    """X is d x n (column i is the point X_i), Y has length n."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        Y = np.asarray(self.Y, dtype=float).ravel()
        if X.ndim != 2:
            raise DataError(f"X must be a d x n matrix, got shape {X.shape}")
        if X.shape[1] != Y.shape[0]:
            raise DataError(f"X has {X.shape[1]} points but Y has {Y.shape[0]} values")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError("dataset needs d >= 1 and n >= 1")
        if not (np.isfinite(X).all() and np.isfinite(Y).all()):
            raise DataError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_points(cls, points, Y) -> "Dataset":
        return cls(np.asarray(points, dtype=float).reshape(len(Y), -1).T, Y)

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @cached_property
    def points(self) -> np.ndarray:
        """n x d view: row i is X_i."""
        return np.ascontiguousarray(self.X.T)


# ----- gradient sets -----

def _parse_q(v: Any) -> float:
    if isinstance(v, str):
        v = math.inf if v.strip().lower() in ("inf", "infinity") else float(v)
    v = float(v)
    if v not in (1.0, 2.0, math.inf):
        raise ValueError("q must be 1, 2 or inf")
    return v


class _Shape(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    def check_dimensions(self, d: int, n: int) -> None:
        pass

    def block(self, i: int) -> "ShapeConstraint":
        """The set constraining xi_i."""
        return self  # type: ignore[return-value]


class NoShape(_Shape):
    kind: Literal["none"] = "none"


class Monotone(_Shape):
    """Coordinates in K1 non-negative, K2 non-positive, the rest free (0-based indices)."""

    kind: Literal["monotone"] = "monotone"
    K1: list[int] = Field(default_factory=list)
    K2: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_disjoint(self):
        if any(k < 0 for k in self.K1 + self.K2):
            raise ValueError("monotone indices must be non-negative")
        if set(self.K1) & set(self.K2):
            raise ValueError("K1 and K2 must be disjoint")
        return self

    def check_dimensions(self, d: int, n: int) -> None:
        if any(k >= d for k in self.K1 + self.K2):
            raise ShapeError(f"monotone index out of range for d={d}")

    def signs(self, d: int) -> np.ndarray:
        """+1 on K1, -1 on K2, 0 on the free coordinates."""
        s = np.zeros(d)
        s[list(self.K1)] = 1.0
        s[list(self.K2)] = -1.0
        return s


class Box(_Shape):
    """Componentwise bounds; null entries are unbounded."""

    kind: Literal["box"] = "box"
    L: list[float | None]
    U: list[float | None]

    @model_validator(mode="after")
    def check_ordered(self):
        if len(self.L) != len(self.U):
            raise ValueError("L and U must have the same length")
        if np.any(self.lower > self.upper):
            raise ValueError("box needs L <= U")
        return self

    @property
    def lower(self) -> np.ndarray:
        return np.array([-math.inf if v is None else v for v in self.L], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([math.inf if v is None else v for v in self.U], dtype=float)

    @classmethod
    def from_arrays(cls, lower, upper) -> "Box":
        conv = lambda a: [None if not math.isfinite(v) else float(v) for v in np.ravel(a)]
        return cls(L=conv(lower), U=conv(upper))

    def check_dimensions(self, d: int, n: int) -> None:
        if len(self.L) != d:
            raise ShapeError(f"box has {len(self.L)} bounds for d={d}")


class LipschitzBall(_Shape):
    """Gradients in the l_q ball of radius L (the function is L-Lipschitz in the dual norm)."""

    kind: Literal["lipschitz"] = "lipschitz"
    q: float
    L: float = Field(gt=0)

    @field_validator("q", mode="before")
    @classmethod
    def parse_q(cls, v: Any) -> float:
        return _parse_q(v)

    @field_serializer("q")
    def dump_q(self, q: float):
        return "inf" if math.isinf(q) else int(q)

    @field_validator("L")
    @classmethod
    def check_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("L must be finite")
        return v


class PerPointBall(_Shape):
    """Per-point l_q ball radii L_i, usually estimated from nearest neighbours."""

    kind: Literal["per_point"] = "per_point"
    q: float
    L: list[float]

    @field_validator("q", mode="before")
    @classmethod
    def parse_q(cls, v: Any) -> float:
        return _parse_q(v)

    @field_serializer("q")
    def dump_q(self, q: float):
        return "inf" if math.isinf(q) else int(q)

    @field_validator("L")
    @classmethod
    def check_positive(cls, v: list[float]) -> list[float]:
        if not v or any(not (x > 0 and math.isfinite(x)) for x in v):
            raise ValueError("per-point radii must be positive and finite")
        return v

    def check_dimensions(self, d: int, n: int) -> None:
        if len(self.L) != n:
            raise ShapeError(f"per-point radii has {len(self.L)} entries for n={n}")

    def block(self, i: int) -> LipschitzBall:
        return LipschitzBall(q=self.q, L=self.L[i])


ShapeConstraint = Annotated[
    Union[NoShape, Monotone, Box, LipschitzBall, PerPointBall], Field(discriminator="kind")
]
_shape_adapter: TypeAdapter = TypeAdapter(ShapeConstraint)


def parse_shape(data: dict | str | bytes) -> ShapeConstraint:
    try:
        if isinstance(data, (str, bytes)):
            return _shape_adapter.validate_json(data)
        return _shape_adapter.validate_python(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise SchemaError(err["msg"], field=".".join(str(p) for p in err["loc"]) or "shape") from exc


def dump_shape(shape: ShapeConstraint) -> dict:
    return shape.model_dump(mode="json")


def mirror_shape(shape: ShapeConstraint) -> ShapeConstraint:
    """Gradient set of -f when f has gradients in `shape`."""
    if isinstance(shape, Monotone):
        return Monotone(K1=list(shape.K2), K2=list(shape.K1))
    if isinstance(shape, Box):
        return Box.from_arrays(-shape.upper, -shape.lower)
    return shape


# ----- standardization -----

class StandardizationRecord(BaseModel):
    """Per-coordinate centering and l2 scaling of X rows and of Y."""

    row_means: list[float]
    row_norms: list[float]
    y_mean: float
    y_norm: float

    def apply(self, dataset: Dataset) -> Dataset:
        m = np.array(self.row_means)[:, None]
        s = np.array(self.row_norms)[:, None]
        return Dataset((dataset.X - m) / s, (dataset.Y - self.y_mean) / self.y_norm)

    def restore(self, theta: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map a standardized (theta, xi) back to the original scale."""
        s = np.array(self.row_norms)
        return self.y_mean + self.y_norm * theta, xi * (self.y_norm / s)[None, :]

    def scale_shape(self, shape: ShapeConstraint) -> ShapeConstraint:
        """The gradient set seen on the standardized scale."""
        if isinstance(shape, (NoShape, Monotone)):
            return shape
        if isinstance(shape, Box):
            f = np.array(self.row_norms) / self.y_norm
            return Box.from_arrays(shape.lower * f, shape.upper * f)
        raise ShapeError(f"{shape.kind} constraints are fitted on the raw scale")


def supports_standardization(shape: ShapeConstraint) -> bool:
    return isinstance(shape, (NoShape, Monotone, Box))


def standardize(dataset: Dataset, shape: ShapeConstraint | None = None) -> tuple["ProblemInstance", StandardizationRecord]:
    """Center each coordinate of X and Y, then scale to unit l2 norm."""
    shape = shape if shape is not None else NoShape()
    row_means = dataset.X.mean(axis=1)
    centred = dataset.X - row_means[:, None]
    row_norms = np.linalg.norm(centred, axis=1)
    y_mean = float(dataset.Y.mean())
    y_norm = float(np.linalg.norm(dataset.Y - y_mean))
    if np.any(row_norms == 0):
        bad = int(np.flatnonzero(row_norms == 0)[0])
        raise DataError(f"coordinate {bad} of X has zero variance")
    if y_norm == 0:
        raise DataError("Y has zero variance")
    record = StandardizationRecord(
        row_means=row_means.tolist(), row_norms=row_norms.tolist(), y_mean=y_mean, y_norm=y_norm
    )
    instance = ProblemInstance(record.apply(dataset), record.scale_shape(shape), record=record, raw=dataset, raw_shape=shape)
    return instance, record


# ----- indexing -----

def linear_index(i: int, j: int, n: int) -> int:
    if not (0 <= i < n and 0 <= j < n):
        raise IndexRangeError(f"pair ({i}, {j}) out of range for n={n}")
    return i * n + j


def pair_index(k: int, n: int) -> tuple[int, int]:
    if not (0 <= k < n * n):
        raise IndexRangeError(f"row {k} out of range for n={n}")
    return divmod(k, n)


def block_ranges(n: int, block_count: int) -> list[tuple[int, int]]:
    """Contiguous ranges of block indices i; each holds about n^2/block_count rows."""
    edges = np.linspace(0, n, min(block_count, n) + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def scan_blocks(fn: Callable[[int, int], T], n: int, block_count: int, threads: int = 1) -> list[T]:
    """Apply fn(a, b) to every block range; results come back in block order."""
    ranges = block_ranges(n, block_count)
    if threads <= 1 or len(ranges) == 1:
        return [fn(a, b) for a, b in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), ranges))


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("kd,kd->k", a, b)


# ----- instance -----

class ProblemInstance:
    """Dataset plus gradient set on the working scale, with cached point statistics."""

    def __init__(
        self,
        dataset: Dataset,
        shape: ShapeConstraint | None = None,
        *,
        record: StandardizationRecord | None = None,
        raw: Dataset | None = None,
        raw_shape: ShapeConstraint | None = None,
    ):
        self.dataset = dataset
        self.shape = shape if shape is not None else NoShape()
        self.shape.check_dimensions(dataset.d, dataset.n)
        self.record = record
        self.raw = raw if raw is not None else dataset
        self.raw_shape = raw_shape if raw_shape is not None else self.shape

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def d(self) -> int:
        return self.dataset.d

    @property
    def Y(self) -> np.ndarray:
        return self.dataset.Y

    @property
    def points(self) -> np.ndarray:
        return self.dataset.points

    @property
    def standardized(self) -> bool:
        return self.record is not None

    @cached_property
    def point_sum(self) -> np.ndarray:
        return self.points.sum(axis=0)

    @cached_property
    def point_gram(self) -> np.ndarray:
        return self.points.T @ self.points

    @cached_property
    def point_outer(self) -> np.ndarray:
        """n x d^2: row i is vec(X_i X_i^T)."""
        P = self.points
        return np.einsum("ni,nj->nij", P, P).reshape(self.n, -1)

    def values_block(self, theta: np.ndarray, xi: np.ndarray, a: int, b: int) -> np.ndarray:
        """Slacks of rows i in [a, b) against every j, as a (b-a) x n matrix."""
        P = self.points
        own = _rowdot(xi[a:b], P[a:b])
        Z = theta[None, :] - theta[a:b, None] + own[:, None] - xi[a:b] @ P.T
        # diagonal rows vanish identically
        Z[np.arange(b - a), np.arange(a, b)] = 0.0
        return Z

    def norm_A(self, theta: np.ndarray) -> float:
        """||A theta|| over all n^2 rows: ||A theta||^2 = 2n||theta||^2 - 2(e^T theta)^2."""
        sq = 2 * self.n * float(theta @ theta) - 2 * float(theta.sum()) ** 2
        return math.sqrt(max(sq, 0.0))

    def norm_B(self, xi: np.ndarray) -> float:
        """||B xi|| over all n^2 rows from per-block quadratic forms."""
        P = self.points
        a = _rowdot(xi, P)
        sq = self.n * float(a @ a) - 2 * float(a @ (xi @ self.point_sum)) + float(np.einsum("nd,de,ne->", xi, self.point_gram, xi))
        return math.sqrt(max(sq, 0.0))

    def gram_blocks(self, active: "ActiveSet") -> np.ndarray:
        """B_i^T B_i restricted to the rows of `active`, as an n x d x d array."""
        P, n, d = self.points, self.n, self.d
        if active.is_full:
            s, S = self.point_sum, self.point_gram
            return (
                n * np.einsum("ni,nj->nij", P, P)
                - np.einsum("ni,j->nij", P, s)
                - np.einsum("i,nj->nij", s, P)
                + S[None, :, :]
            )
        W = active.indicator()
        return weighted_gram(P, W, self.point_outer)


def weighted_gram(P: np.ndarray, W: sparse.csr_matrix, point_outer: np.ndarray) -> np.ndarray:
    """sum_j W_ij (X_i - X_j)(X_i - X_j)^T for every i."""
    n, d = P.shape
    r = np.asarray(W.sum(axis=1)).ravel()
    WP = W @ P
    WPP = np.asarray(W @ point_outer).reshape(n, d, d)
    return (
        r[:, None, None] * np.einsum("ni,nj->nij", P, P)
        - np.einsum("ni,nj->nij", P, WP)
        - np.einsum("ni,nj->nij", WP, P)
        + WPP
    )


# ----- constraint subsets -----

class ActiveSet:
    """Ordered subset I of the n^2 convexity rows; rows=None means all of them.

    Multipliers over I are flat arrays in the row order of I. For the full set that
    order is the C-order ravel of the n x n slack matrix.
    """

    def __init__(self, n: int, rows: Iterable[int] | np.ndarray | None = None):
        self.n = int(n)
        if rows is None:
            self.rows = None
            return
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        if rows.size and (rows[0] < 0 or rows[-1] >= self.n * self.n):
            raise IndexRangeError(f"active rows out of range for n={n}")
        self.rows = rows

    @classmethod
    def full(cls, n: int) -> "ActiveSet":
        return cls(n)

    @property
    def is_full(self) -> bool:
        return self.rows is None

    @property
    def size(self) -> int:
        return self.n * self.n if self.rows is None else int(self.rows.size)

    def __len__(self) -> int:
        return self.size

    @cached_property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.rows is None:
            k = np.arange(self.n * self.n, dtype=np.int64)
            return k // self.n, k % self.n
        return self.rows // self.n, self.rows % self.n

    @cached_property
    def _csr_layout(self) -> tuple[np.ndarray, np.ndarray]:
        i, j = self.pairs
        indptr = np.concatenate(([0], np.cumsum(np.bincount(i, minlength=self.n)))).astype(np.int64)
        return j.astype(np.int64), indptr

    def matrix(self, u: np.ndarray):
        """u over I as an n x n matrix (dense for the full set, CSR otherwise)."""
        if self.rows is None:
            return u.reshape(self.n, self.n)
        indices, indptr = self._csr_layout
        return sparse.csr_matrix((u, indices, indptr), shape=(self.n, self.n))

    def indicator(self) -> sparse.csr_matrix:
        """0/1 matrix of the off-diagonal rows in I."""
        if self.rows is None:
            W = np.ones((self.n, self.n))
            np.fill_diagonal(W, 0.0)
            return sparse.csr_matrix(W)
        return self.select(np.ones(self.size, dtype=bool))

    def select(self, mask: np.ndarray) -> sparse.csr_matrix:
        """0/1 CSR matrix of the rows of I where mask holds, diagonal rows dropped."""
        n = self.n
        if self.rows is None:
            M = mask.reshape(n, n).copy()
            np.fill_diagonal(M, False)
            return sparse.csr_matrix(M, dtype=float)
        i, j = self.pairs
        keep = mask & (i != j)
        ii, jj = i[keep], j[keep]
        indptr = np.concatenate(([0], np.cumsum(np.bincount(ii, minlength=n)))).astype(np.int64)
        return sparse.csr_matrix((np.ones(ii.size), jj, indptr), shape=(n, n))

    def values(self, problem: ProblemInstance, theta: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """(A theta + B xi) restricted to I."""
        if self.rows is None:
            return problem.values_block(theta, xi, 0, self.n).ravel()
        i, j = self.pairs
        P = problem.points
        own = _rowdot(xi, P)
        z = theta[j] - theta[i] + own[i] - _rowdot(xi[i], P[j])
        z[i == j] = 0.0
        return z

    def adjoint(self, problem: ProblemInstance, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(A_I^T u, B_I^T u); the second as an n x d array."""
        U = self.matrix(u)
        P = problem.points
        if self.rows is None:
            rsum, csum = U.sum(axis=1), U.sum(axis=0)
        else:
            rsum, csum = np.asarray(U.sum(axis=1)).ravel(), np.asarray(U.sum(axis=0)).ravel()
        return csum - rsum, rsum[:, None] * P - np.asarray(U @ P)

    def block_u(self, u: np.ndarray, a: int, b: int) -> np.ndarray:
        """Dense (b-a) x n slice of u over block rows [a, b), zero outside I."""
        if self.rows is None:
            return u.reshape(self.n, self.n)[a:b]
        return self.matrix(u)[a:b].toarray()

    def block_members(self, a: int, b: int) -> np.ndarray:
        """Boolean (b-a) x n membership of block rows [a, b) in I."""
        if self.rows is None:
            return np.ones((b - a, self.n), dtype=bool)
        out = np.zeros((b - a, self.n), dtype=bool)
        lo, hi = np.searchsorted(self.rows, [a * self.n, b * self.n])
        k = self.rows[lo:hi]
        out[k // self.n - a, k % self.n] = True
        return out

    def union(self, new_rows: np.ndarray) -> "ActiveSet":
        if self.rows is None:
            return self
        merged = ActiveSet(self.n, np.concatenate([self.rows, np.asarray(new_rows, dtype=np.int64)]))
        if merged.size >= self.n * (self.n - 1) and not np.any(merged.pairs[0] == merged.pairs[1]):
            return ActiveSet.full(self.n)
        return merged

    def remap(self, u: np.ndarray, target: "ActiveSet") -> np.ndarray:
        """Carry multipliers over I onto `target` (a superset); new rows start at zero."""
        if target.rows is None:
            out = np.zeros(self.n * self.n)
            out[np.arange(self.n * self.n) if self.rows is None else self.rows] = u
            return out
        if self.rows is None:
            return u[target.rows].copy()
        out = np.zeros(target.size)
        pos = np.searchsorted(target.rows, self.rows)
        out[pos] = u
        return out


def constraint_values(problem: ProblemInstance, theta, xi, rows: ActiveSet | np.ndarray | None = None) -> np.ndarray:
    active = rows if isinstance(rows, ActiveSet) else ActiveSet(problem.n, rows)
    return active.values(problem, np.asarray(theta, float), np.asarray(xi, float).reshape(problem.n, problem.d))


def adjoint_scatter(problem: ProblemInstance, u, rows: ActiveSet | np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    active = rows if isinstance(rows, ActiveSet) else ActiveSet(problem.n, rows)
    u = np.asarray(u, dtype=float)
    if u.size != active.size:
        raise ShapeError(f"multiplier has {u.size} entries for {active.size} rows")
    return active.adjoint(problem, u)


def build_instance(dataset: Dataset, shape: ShapeConstraint | None = None, *, standardize_data: bool = True) -> ProblemInstance:
    """Standardized instance when the shape allows it and n >= 2, otherwise the raw one."""
    shape = shape if shape is not None else NoShape()
    if standardize_data and dataset.n >= 2 and supports_standardization(shape):
        return standardize(dataset, shape)[0]
    if standardize_data:
        log.info("standardize_skipped", extra={"shape": shape.kind, "n": dataset.n})
    return ProblemInstance(dataset, shape)
