"""Option pricing oracles and datasets: Black-Scholes calls, basket Monte Carlo and a
two-asset finite-difference solver."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import eigh, solve_banded
from scipy.special import ndtr

from shapereg.config import FitConfig
from shapereg.errors import ParameterError
from shapereg.problem import Box, Dataset, NoShape

log = logging.getLogger("shapereg.finance")

# Monte-Carlo samples per seeded shard; the shard layout depends only on n_samples
SHARD_SIZE = 1 << 16


def _call(S, K: float, r: float, sigma: float, tau: float) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if tau <= 0:
        return np.maximum(S - K, 0.0)
    if K == 0:
        return S.copy()
    out = np.zeros_like(S)
    pos = S > 0
    vol = sigma * math.sqrt(tau)
    d1 = (np.log(S[pos] / K) + (r + 0.5 * sigma**2) * tau) / vol
    out[pos] = S[pos] * ndtr(d1) - K * math.exp(-r * tau) * ndtr(d1 - vol)
    return out


def bs_call(S, K: float, r: float, sigma: float, tau: float):
    """European call price S Phi(d1) - K e^{-r tau} Phi(d2); tau <= 0 gives the payoff."""
    S_arr = np.asarray(S, dtype=float)
    if np.any(S_arr <= 0):
        raise ParameterError("spot price must be positive")
    if sigma <= 0:
        raise ParameterError("volatility must be positive")
    if K < 0:
        raise ParameterError("strike must be non-negative")
    out = _call(S_arr, K, r, sigma, tau)
    return float(out) if out.ndim == 0 else out


class EuropeanSpec(BaseModel):
    K: float = Field(default=10.0, gt=0)
    r: float = 0.0
    sigma: float = Field(default=0.2, gt=0)
    t: float = Field(default=0.1, ge=0)
    T: float = 0.4

    @model_validator(mode="after")
    def check_times(self):
        if self.T <= self.t:
            raise ValueError("T must exceed t")
        return self

    @property
    def tau(self) -> float:
        return self.T - self.t


class BasketSpec(BaseModel):
    """Call on the weighted sum w^T S of M correlated lognormal assets."""

    w: list[float]
    K: float = Field(default=10.0, ge=0)
    r: float = 0.0
    rho: float = 0.1
    sigma: list[float]
    t: float = Field(default=0.0, ge=0)
    T: float = 0.5

    @model_validator(mode="after")
    def check_spec(self):
        M = len(self.w)
        if M < 1 or len(self.sigma) != M:
            raise ValueError("w and sigma must have the same positive length")
        if any(v < 0 for v in self.w) or abs(sum(self.w) - 1.0) > 1e-9:
            raise ValueError("weights must lie on the simplex")
        if any(s <= 0 for s in self.sigma):
            raise ValueError("volatilities must be positive")
        if self.T <= self.t:
            raise ValueError("T must exceed t")
        if M > 1 and not (-1.0 / (M - 1) < self.rho < 1.0):
            raise ValueError("correlation matrix is not positive definite")
        return self

    @classmethod
    def standard(cls, M: int, **overrides) -> "BasketSpec":
        """Equal weights, sigma_i = 0.2 + 0.025(i-1) (0.2, 0.3 for two assets), K=10, rho=0.1, T=0.5."""
        sigma = [0.2, 0.3] if M == 2 else [0.2 + 0.025 * i for i in range(M)]
        return cls(**{"w": [1.0 / M] * M, "sigma": sigma, **overrides})

    @property
    def M(self) -> int:
        return len(self.w)

    @property
    def tau(self) -> float:
        return self.T - self.t

    def covariance(self) -> np.ndarray:
        s = np.asarray(self.sigma)
        corr = np.full((self.M, self.M), self.rho)
        np.fill_diagonal(corr, 1.0)
        return self.tau * corr * np.outer(s, s)

    def sqrt_covariance(self) -> np.ndarray:
        """Symmetric square root V diag(sqrt(lam)) V^T."""
        lam, V = eigh(self.covariance())
        if lam.min() <= 0:
            raise ParameterError("covariance is not positive definite")
        return (V * np.sqrt(lam)) @ V.T

    def drift(self) -> np.ndarray:
        s = np.asarray(self.sigma)
        return (self.r - 0.5 * s**2) * self.tau


def _shards(n_samples: int, seed: int) -> list[tuple[int, np.random.SeedSequence]]:
    counts = [SHARD_SIZE] * (n_samples // SHARD_SIZE)
    if n_samples % SHARD_SIZE:
        counts.append(n_samples % SHARD_SIZE)
    return list(zip(counts, np.random.SeedSequence(seed).spawn(len(counts))))


def _growth(spec: BasketSpec, count: int, seq: np.random.SeedSequence, F: np.ndarray) -> np.ndarray:
    Z = np.random.default_rng(seq).standard_normal((count, spec.M))
    return np.exp(spec.drift() + Z @ F)


def mc_basket(spec: BasketSpec, x0, n_samples: int = 100_000, seed: int = 0, *, threads: int = 1) -> tuple[float, float]:
    """Discounted Monte-Carlo price and its standard error at spot x0."""
    x0 = np.asarray(x0, dtype=float).reshape(spec.M)
    if np.any(x0 <= 0):
        raise ParameterError("spot prices must be positive")
    if n_samples < 2:
        raise ParameterError("need at least two samples")
    F = spec.sqrt_covariance()
    w = np.asarray(spec.w) * x0

    def shard(job):
        count, seq = job
        pay = np.maximum(_growth(spec, count, seq, F) @ w - spec.K, 0.0)
        return float(pay.sum()), float(pay @ pay)

    jobs = _shards(n_samples, seed)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(shard, jobs))
    else:
        parts = [shard(j) for j in jobs]
    total = sum(p[0] for p in parts)
    total_sq = sum(p[1] for p in parts)
    mean = total / n_samples
    var = max(total_sq - n_samples * mean * mean, 0.0) / (n_samples - 1)
    disc = math.exp(-spec.r * spec.tau)
    return disc * mean, disc * math.sqrt(var / n_samples)


def mc_basket_many(spec: BasketSpec, points, n_samples: int = 100_000, seed: int = 0, *, chunk: int = 32) -> np.ndarray:
    """Monte-Carlo prices at many spots with common random numbers across spots."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    F = spec.sqrt_covariance()
    Wp = P * np.asarray(spec.w)[None, :]
    sums = np.zeros(P.shape[0])
    for count, seq in _shards(n_samples, seed):
        G = _growth(spec, count, seq, F)
        for a in range(0, P.shape[0], chunk):
            sums[a:a + chunk] += np.maximum(Wp[a:a + chunk] @ G.T - spec.K, 0.0).sum(axis=1)
    return math.exp(-spec.r * spec.tau) * sums / n_samples


@dataclass
class FDMSolution:
    x: np.ndarray
    y: np.ndarray
    tau: np.ndarray
    u: np.ndarray  # (len(tau), len(x), len(y))

    @property
    def final(self) -> np.ndarray:
        return self.u[-1]

    def value(self, x, y, step: int = -1):
        """Bilinear interpolation of the slice at time index `step`."""
        interp = RegularGridInterpolator((self.x, self.y), self.u[step], method="linear")
        pts = np.column_stack([np.ravel(x), np.ravel(y)])
        out = interp(pts)
        return float(out[0]) if np.ndim(x) == 0 else out


def _tridiagonal(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Banded storage for solve_banded((1, 1), ...): lower[k] = a[k+1, k], upper[k] = a[k, k+1]."""
    m = diag.size
    ab = np.zeros((3, m))
    ab[0, 1:] = upper
    ab[1] = diag
    ab[2, :-1] = lower
    return ab


def _sweep_matrix(coord: np.ndarray, h: float, sigma: float, r: float, dt: float) -> tuple[np.ndarray, float]:
    """Implicit operator I - dt L on nodes 1..N (Neumann at N) and the coupling to node 0."""
    N = coord.size - 1
    c = coord[1:N]
    diff = 0.5 * sigma**2 * c**2 / h**2
    conv = r * c / (2 * h)
    lo, mid, up = diff - conv, -2 * diff - 0.5 * r, diff + conv
    diag = np.concatenate([1 - dt * mid, [1.0]])
    upper = -dt * up
    lower = np.concatenate([-dt * lo[1:], [-1.0]])
    return _tridiagonal(lower, diag, upper), float(dt * lo[0])


def fdm_basket_2d(
    spec: BasketSpec, x_max: float | None = None, y_max: float | None = None,
    nx: int = 200, ny: int = 200, nt: int = 200, *, keep_history: bool = True,
) -> FDMSolution:
    """Two-asset basket call by implicit alternating-direction steps with an explicit cross term.

    Boundaries: u(tau, x, 0) and u(tau, 0, y) are single-asset calls, du/dx = w1 at x_max and
    du/dy = w2 at y_max, with the corner averaging the two Neumann conditions.
    """
    if spec.M != 2:
        raise ParameterError("the finite-difference solver handles two assets")
    if min(nx, ny, nt) < 50:
        raise ParameterError("grid too coarse (need at least 50 steps per axis)")
    K, r, rho = spec.K, spec.r, spec.rho
    (w1, w2), (s1, s2) = spec.w, spec.sigma
    x_max = 5 * K if x_max is None else x_max
    y_max = 5 * K if y_max is None else y_max
    if x_max < 5 * K or y_max < 5 * K or x_max <= 0 or y_max <= 0:
        raise ParameterError("domain must cover (0, 5K) in both assets")

    x = np.linspace(0.0, x_max, nx + 1)
    y = np.linspace(0.0, y_max, ny + 1)
    hx, hy, dt = x[1], y[1], spec.tau / nt
    taus = np.linspace(0.0, spec.tau, nt + 1)

    U = np.maximum(w1 * x[:, None] + w2 * y[None, :] - K, 0.0)
    history = [U.copy()] if keep_history else []
    ab_x, couple_x = _sweep_matrix(x, hx, s1, r, dt)
    ab_y, couple_y = _sweep_matrix(y, hy, s2, r, dt)
    cross = rho * s1 * s2 * np.outer(x[1:nx], y[1:ny]) / (4 * hx * hy)

    for k in range(1, nt + 1):
        tau = taus[k]
        edge_x0 = _call(w2 * y, K, r, s2, tau)   # u(tau, 0, y)
        edge_y0 = _call(w1 * x, K, r, s1, tau)   # u(tau, x, 0)

        R = U.copy()
        R[1:nx, 1:ny] += dt * cross * (U[2:, 2:] - U[2:, :-2] - U[:-2, 2:] + U[:-2, :-2])

        # implicit in x along each interior y line
        rhs = np.empty((nx, ny - 1))
        rhs[:-1] = R[1:nx, 1:ny]
        rhs[0] += couple_x * edge_x0[1:ny]
        rhs[-1] = w1 * hx
        Ustar = np.empty_like(U)
        Ustar[1:, 1:ny] = solve_banded((1, 1), ab_x, rhs)

        # implicit in y along each interior x line
        rhs = np.empty((ny, nx - 1))
        rhs[:-1] = Ustar[1:nx, 1:ny].T
        rhs[0] += couple_y * edge_y0[1:nx]
        rhs[-1] = w2 * hy
        U_new = np.empty_like(U)
        U_new[1:nx, 1:] = solve_banded((1, 1), ab_y, rhs).T

        U_new[0, :] = edge_x0
        U_new[:, 0] = edge_y0
        U_new[nx, 1:ny] = U_new[nx - 1, 1:ny] + w1 * hx
        U_new[nx, ny] = 0.5 * ((U_new[nx - 1, ny] + w1 * hx) + (U_new[nx, ny - 1] + w2 * hy))
        U = U_new
        if keep_history:
            history.append(U.copy())

    u = np.stack(history) if keep_history else U[None]
    return FDMSolution(x, y, taus if keep_history else taus[-1:], u)


def sample_option_dataset(kind: str, spec: EuropeanSpec | BasketSpec, n: int, seed: int = 0) -> Dataset:
    """Training data: spot prices and one discounted payoff per spot."""
    if n < 1:
        raise ParameterError("n must be positive")
    rng = np.random.default_rng(seed)
    if kind == "european":
        if not isinstance(spec, EuropeanSpec):
            raise ParameterError("european sampling needs a EuropeanSpec")
        s, r = spec.sigma, spec.r
        log_s = rng.normal(math.log(spec.K) + (r - 0.5 * s**2) * spec.t, s * math.sqrt(spec.t) if spec.t > 0 else 0.0, n)
        log_st = log_s + (r - 0.5 * s**2) * spec.tau + s * math.sqrt(spec.tau) * rng.standard_normal(n)
        V = math.exp(-r * spec.tau) * np.maximum(np.exp(log_st) - spec.K, 0.0)
        return Dataset(np.exp(log_s)[None, :], V)
    if kind == "basket":
        if not isinstance(spec, BasketSpec):
            raise ParameterError("basket sampling needs a BasketSpec")
        if spec.K <= 0:
            raise ParameterError("basket sampling draws spots on (0, 5K) and needs K > 0")
        S = rng.uniform(0.0, 5 * spec.K, size=(n, spec.M))
        S = np.where(S > 0, S, np.nextafter(0.0, 1.0))
        Z = rng.standard_normal((n, spec.M))
        ST = S * np.exp(spec.drift() + Z @ spec.sqrt_covariance())
        V = math.exp(-spec.r * spec.tau) * np.maximum(ST @ np.asarray(spec.w) - spec.K, 0.0)
        return Dataset.from_points(S, V)
    raise ParameterError(f"unknown option dataset kind {kind!r}")


class ExperimentResult(BaseModel):
    n: int
    n_test: int
    uc_mse: float
    sc_mse: float


def european_experiment(spec: EuropeanSpec = EuropeanSpec(), n: int = 200, n_test: int = 1000, seed: int = 0,
                        config: FitConfig = FitConfig(standardize=False)) -> ExperimentResult:
    """Unconstrained vs box [0, 1] fit against the closed-form price.

    Test spots are evenly spaced across the sampled spot range. The box bounds the
    slope in price units, so the default fits on the original scale.
    """
    from shapereg.estimator import fit

    data = sample_option_dataset("european", spec, n, seed)
    spots = data.points[:, 0]
    test = np.linspace(spots.min(), spots.max(), n_test)[:, None]
    truth = bs_call(test[:, 0], spec.K, spec.r, spec.sigma, spec.tau)
    uc = fit(data, NoShape(), config)
    sc = fit(data, Box(L=[0.0], U=[1.0]), config)
    res = ExperimentResult(
        n=n, n_test=n_test,
        uc_mse=float(np.mean((uc.evaluate(test) - truth) ** 2)),
        sc_mse=float(np.mean((sc.evaluate(test) - truth) ** 2)),
    )
    log.info("european_experiment", extra=res.model_dump())
    return res


def basket_experiment(spec: BasketSpec, n: int = 200, n_test: int = 1000, seed: int = 0, mc_samples: int = 100_000,
                      config: FitConfig = FitConfig(standardize=False)) -> ExperimentResult:
    """Unconstrained vs box [0, w] fit against Monte-Carlo prices at uniform test spots."""
    from shapereg.estimator import fit

    data = sample_option_dataset("basket", spec, n, seed)
    rng = np.random.default_rng([seed, 2])
    test = rng.uniform(0.0, 5 * spec.K, size=(n_test, spec.M))
    truth = mc_basket_many(spec, test, mc_samples, seed + 1)
    uc = fit(data, NoShape(), config)
    sc = fit(data, Box(L=[0.0] * spec.M, U=list(spec.w)), config)
    res = ExperimentResult(
        n=n, n_test=n_test,
        uc_mse=float(np.mean((uc.evaluate(test) - truth) ** 2)),
        sc_mse=float(np.mean((sc.evaluate(test) - truth) ** 2)),
    )
    log.info("basket_experiment", extra=res.model_dump())
    return res
