"""Solver configuration objects. Field constraints carry the parameter invariants."""
from __future__ import annotations

import math
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, field_validator

GOLDEN = (1 + math.sqrt(5)) / 2


class Engine(str, Enum):
    PROXALM = "proxalm"
    ADMM = "admm"
    CGM_PROXALM = "cgm-proxalm"
    CGM_ADMM = "cgm-admm"

    @property
    def inner(self) -> "Engine":
        return {Engine.CGM_PROXALM: Engine.PROXALM, Engine.CGM_ADMM: Engine.ADMM}.get(self, self)

    @property
    def uses_cgm(self) -> bool:
        return self in (Engine.CGM_PROXALM, Engine.CGM_ADMM)


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SSNConfig(_Config):
    mu: float = Field(default=0.2, gt=0, lt=0.5)
    delta: float = Field(default=0.5, gt=0, lt=1)
    gamma_bar: float = Field(default=0.1, gt=0, lt=1)
    tau: float = Field(default=0.2, gt=0, le=1)
    max_iter: int = Field(default=100, ge=1)
    max_backtracks: int = Field(default=50, ge=1)
    # (d+1)n at or below this uses a dense Cholesky solve, above it preconditioned CG
    direct_threshold: int = Field(default=2000, ge=0)
    cg_cap_factor: int = Field(default=10, ge=1)


class ProxALMConfig(_Config):
    sigma0: float = Field(default=1.0, gt=0)
    sigma_growth: float = Field(default=1.6, ge=1)
    sigma_max: float = Field(default=1e6, gt=0)
    h1: float = Field(default=1e-3, gt=0)
    h2: float = Field(default=1e-3, gt=0)
    eps0: float = Field(default=1.0, gt=0)
    eps_decay: float = Field(default=0.5, gt=0, lt=1)
    kkt_tol: float = Field(default=1e-6, gt=0)
    max_outer: int = Field(default=100, ge=1)
    block_count: int = Field(default=10, ge=1)
    threads: int = Field(default=1, ge=1)
    ssn: SSNConfig = Field(default_factory=SSNConfig)

    @property
    def lambda_min(self) -> float:
        return min(self.h1, self.h2, 1.0)

    @property
    def lambda_max(self) -> float:
        return max(self.h1, self.h2, 1.0)

    def eps(self, k: int) -> float:
        """Summable accuracy sequence for the absolute stopping rule."""
        return self.eps0 * self.eps_decay**k

    def delta(self, k: int, step_norm: float) -> float:
        """Relative accuracy for outer step k (0-based), damped every 20 steps."""
        floor = 1e-6 / step_norm if step_norm > 0 else math.inf
        return max(0.1, floor) / max(1, math.ceil((k + 1) / 20)) ** 2


class ADMMConfig(_Config):
    sigma0: float = Field(default=1.0, gt=0)
    tau_step: float = Field(default=1.618, gt=0)
    max_iter: int = Field(default=20000, ge=1)
    kkt_tol: float = Field(default=1e-6, gt=0)
    rescale: bool = True
    # sigma moves by sqrt(ratio) when feasibility and stationarity residuals differ by more than this
    rescale_ratio: float = Field(default=5.0, gt=1)
    rescale_every: int = Field(default=10, ge=1)
    kkt_every: int = Field(default=10, ge=1)
    block_count: int = Field(default=10, ge=1)
    threads: int = Field(default=1, ge=1)

    @field_validator("tau_step")
    @classmethod
    def check_golden(cls, v: float) -> float:
        if v >= GOLDEN:
            raise ValueError(f"tau_step must be below {GOLDEN:.6f}")
        return v


class CGMConfig(_Config):
    tol: float = Field(default=1e-6, gt=0)
    # Initial working-set size as a multiple of n; None -> 10 (50 when d <= 2)
    initial_factor: float | None = Field(default=None, gt=0)
    max_rounds: int = Field(default=30, ge=1)
    seed: int = Field(default=0, ge=0)
    block_count: int = Field(default=10, ge=1)
    threads: int = Field(default=1, ge=1)

    def initial_size(self, n: int, d: int) -> int:
        factor = self.initial_factor if self.initial_factor is not None else (50 if d <= 2 else 10)
        return min(int(math.ceil(factor * n)), n * (n - 1))


class FitConfig(_Config):
    engine: Engine = Engine.PROXALM
    tol: float = Field(default=1e-6, gt=0)
    standardize: bool = True
    concave: bool = False
    proxalm: ProxALMConfig = Field(default_factory=ProxALMConfig)
    admm: ADMMConfig = Field(default_factory=ADMMConfig)
    cgm: CGMConfig = Field(default_factory=CGMConfig)

    def engine_config(self) -> ProxALMConfig | ADMMConfig:
        """Inner engine config with the fit tolerance applied."""
        if self.engine.inner is Engine.PROXALM:
            return self.proxalm.model_copy(update={"kkt_tol": self.tol})
        return self.admm.model_copy(update={"kkt_tol": self.tol})

    def cgm_config(self) -> CGMConfig:
        return self.cgm.model_copy(update={"tol": self.tol})
