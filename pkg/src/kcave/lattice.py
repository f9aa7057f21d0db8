"""Space-time grid for the stopped random walk and the discretised payoff on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import HorizonError


class ModelKind(str, Enum):
    ARITHMETIC = "bm"
    GEOMETRIC = "letf"

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, ModelKind):
            return value
        v = value.strip().lower()
        aliases = {"bm": cls.ARITHMETIC, "arithmetic": cls.ARITHMETIC,
                   "letf": cls.GEOMETRIC, "geometric": cls.GEOMETRIC}
        if v not in aliases:
            raise ValueError(f"unknown model {value!r}")
        return aliases[v]


@dataclass(frozen=True)
class HorizonPolicy:
    """How far past the payoff horizon the grid extends.

    `slack=None` means ceil(sqrt(N)) extra columns. `override` fixes T_max
    outright and is the only way to build a grid when the strike is zero.
    """

    slack: int | None = None
    override: int | None = None


@dataclass(frozen=True, eq=False)
class Lattice:
    model: ModelKind
    N: int
    j0: int
    jL: int
    j_star: int
    beta: float
    k: float
    up_prob: float
    growth: float  # one-step factor of the martingale kernel h
    T_star: int
    T_max: int
    h: np.ndarray = field(repr=False)  # shape (L+1, T_max+1), row i is level j0+i
    F: np.ndarray = field(repr=False)
    K_idx: np.ndarray = field(repr=False)
    strike_vanishes: bool = True

    @property
    def L(self) -> int:
        return self.jL - self.j0

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.j0, self.jL + 1)

    @property
    def x(self) -> np.ndarray:
        return position(self.model, self.N, self.levels)

    @property
    def x_start(self) -> float:
        return float(position(self.model, self.N, self.j_star))

    @property
    def interior(self) -> np.ndarray:
        return np.arange(self.j0 + 1, self.jL)

    @property
    def down_prob(self) -> float:
        return 1.0 - self.up_prob

    def row(self, j: int) -> int:
        return j - self.j0

    def step_size(self) -> np.ndarray:
        """Expected absolute increment E|X_{t+1} - x_j| for each level."""
        x = self.x
        up = np.empty_like(x)
        down = np.empty_like(x)
        up[:-1] = x[1:] - x[:-1]
        down[1:] = x[1:] - x[:-1]
        up[-1] = up[-2] if len(x) > 1 else 0.0
        down[0] = down[1] if len(x) > 1 else 0.0
        return self.up_prob * up + self.down_prob * down

    def summary(self) -> dict:
        return {
            "model": self.model.value,
            "N": self.N,
            "levels": [float(v) for v in self.x],
            "j0": self.j0,
            "jL": self.jL,
            "j_star": self.j_star,
            "beta": self.beta,
            "strike": self.k,
            "T_star": self.T_star,
            "T_max": self.T_max,
            "up_prob": self.up_prob,
        }


def position(model: ModelKind, N: int, j):
    s = np.asarray(j, dtype=float) / math.sqrt(N)
    return s if model is ModelKind.ARITHMETIC else np.exp(s)


def index_coordinate(model: ModelKind, N: int, x) -> np.ndarray:
    """Inverse of `position`, returning a real-valued level index."""
    x = np.asarray(x, dtype=float)
    if model is ModelKind.ARITHMETIC:
        return x * math.sqrt(N)
    return np.log(x) * math.sqrt(N)


def up_probability(model: ModelKind, N: int) -> float:
    if model is ModelKind.ARITHMETIC:
        return 0.5
    s = 1.0 / math.sqrt(N)
    # solves p*e^s + (1-p)*e^-s = 1
    return -math.expm1(-s) / (2.0 * math.sinh(s))


def growth_factor(model: ModelKind, N: int, beta: float) -> float:
    """rho such that h_{j,t} = x_j^beta * rho^-t is a martingale under the walk."""
    a = beta / math.sqrt(N)
    if model is ModelKind.ARITHMETIC:
        return math.cosh(a)
    p = up_probability(model, N)
    return p * math.exp(a) + (1.0 - p) * math.exp(-a)


def _log_h0(model: ModelKind, N: int, beta: float, j) -> np.ndarray:
    # arithmetic: beta*x_j; geometric: beta*log(x_j); both are beta*j/sqrt(N)
    return beta * np.asarray(j, dtype=float) / math.sqrt(N)


def kernel_value(model: ModelKind, N: int, beta: float, j, t) -> np.ndarray:
    g = growth_factor(model, N, beta)
    return np.exp(_log_h0(model, N, beta, j) - np.asarray(t, dtype=float) * math.log(g))


def _first_vanishing(log_h0: np.ndarray, log_g: float, k: float) -> np.ndarray:
    """min{t >= 0 : h0 * g^-t <= k} per level, exact against the float evaluation."""
    log_k = math.log(k)
    out = np.zeros(len(log_h0), dtype=np.int64)
    for i, lh in enumerate(log_h0):
        if math.exp(lh) <= k:
            continue
        if log_g <= 1e-12:
            raise HorizonError("the kernel does not decay (beta <= 1 on the geometric grid), "
                               "so the payoff never vanishes; an explicit horizon is required")
        t = max(0, math.ceil((lh - log_k) / log_g))
        while math.exp(lh - t * log_g) > k:
            t += 1
        while t > 0 and math.exp(lh - (t - 1) * log_g) <= k:
            t -= 1
        out[i] = t
    return out


def level_range(model: ModelKind, N: int, support: tuple[float, float],
                start: float) -> tuple[int, int, int]:
    """(j0, jL, j_star) covering the support, padded so the start is interior."""
    lo, hi = support
    if lo > hi:
        raise ValueError("support must satisfy lo <= hi")
    if model is ModelKind.GEOMETRIC and (lo <= 0 or start <= 0):
        raise ValueError("geometric model needs a positive support and start")
    j_star = int(round(float(index_coordinate(model, N, start))))
    shift = _start_shift(model, N, start, j_star)
    eps = 1e-9
    a = float(index_coordinate(model, N, _apply_shift(model, lo, shift)))
    b = float(index_coordinate(model, N, _apply_shift(model, hi, shift)))
    j0 = min(math.floor(a + eps), j_star - 1)
    jL = max(math.ceil(b - eps), j_star + 1)
    return j0, jL, j_star


def _start_shift(model: ModelKind, N: int, start: float, j_star: int) -> float:
    xs = float(position(model, N, j_star))
    return xs - start if model is ModelKind.ARITHMETIC else xs / start


def _apply_shift(model: ModelKind, x, shift: float):
    return x + shift if model is ModelKind.ARITHMETIC else x * shift


def build_lattice(model: "ModelKind | str", N: int, support: tuple[float, float],
                  start: float, beta: float, k: float,
                  horizon: HorizonPolicy | None = None) -> Lattice:
    model = ModelKind.parse(model)
    horizon = horizon or HorizonPolicy()
    if N < 1:
        raise ValueError("N must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if k < 0:
        raise ValueError("strike must be non-negative")
    j0, jL, j_star = level_range(model, N, support, start)
    levels = np.arange(j0, jL + 1)
    up = up_probability(model, N)
    g = growth_factor(model, N, beta)
    log_g = math.log(g)
    log_h0 = _log_h0(model, N, beta, levels)

    if k == 0:
        if horizon.override is None:
            raise HorizonError(
                "strike 0: the payoff never vanishes, an explicit horizon is required")
        K_idx = np.full(len(levels), horizon.override, dtype=np.int64)
        T_star = int(horizon.override)
        vanishes = False
    else:
        K_idx = _first_vanishing(log_h0, log_g, k)
        T_star = int(K_idx.max())
        vanishes = True

    if horizon.override is not None:
        T_max = int(horizon.override)
        if T_max < T_star:
            raise HorizonError(f"horizon {T_max} is shorter than the payoff horizon {T_star}")
    else:
        slack = math.ceil(math.sqrt(N)) if horizon.slack is None else int(horizon.slack)
        T_max = T_star + max(slack, 0)
    T_max = max(T_max, 1)

    t = np.arange(T_max + 1)
    h = np.exp(log_h0[:, None] - t[None, :] * log_g)
    F = np.maximum(h - k, 0.0)
    if vanishes:
        F[:, T_star:] = 0.0
    return Lattice(model=model, N=N, j0=j0, jL=jL, j_star=j_star, beta=float(beta),
                   k=float(k), up_prob=up, growth=g, T_star=T_star, T_max=T_max,
                   h=h, F=F, K_idx=K_idx, strike_vanishes=vanishes)


def payoff(lat: Lattice, j: int, t: int) -> float:
    return max(martingale_kernel(lat, j, t) - lat.k, 0.0)


def martingale_kernel(lat: Lattice, j: int, t: int) -> float:
    return float(kernel_value(lat.model, lat.N, lat.beta, j, t))


def k_curve(lat: Lattice) -> np.ndarray:
    return lat.K_idx.copy()


def payoff_horizon(lat: Lattice) -> int:
    if not lat.strike_vanishes:
        raise HorizonError("strike 0: the payoff never vanishes")
    return lat.T_star
