"""Monte Carlo run of the lattice walk against a barrier or a stopping law.

Randomness is counter based: paths are grouped in fixed chunks of CHUNK, and chunk c
draws from Philox keyed by (seed, c). A path's draws therefore depend only on the seed
and its index, and the per-node stop counts do not depend on how chunks are scheduled.
All reported sums are computed from those integer counts.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from .barrier import KCaveBarrier
from .embed_lp import StoppingLaw
from .errors import RuleMismatch
from .lattice import Lattice

CHUNK = 1 << 15


@dataclass
class PathStats:
    n_paths: int
    node_counts: np.ndarray  # stops per (level row, time), int64
    seed: int
    rule: str
    F: np.ndarray = field(repr=False)  # payoff grid used for the sums

    @property
    def stop_counts(self) -> np.ndarray:
        return self.node_counts.sum(axis=1)

    @property
    def stop_time_sums(self) -> np.ndarray:
        t = np.arange(self.node_counts.shape[1], dtype=np.int64)
        return self.node_counts @ t

    @property
    def payoff_sum(self) -> float:
        return float(np.sum(self.node_counts * self.F))

    @property
    def payoff_sq_sum(self) -> float:
        return float(np.sum(self.node_counts * self.F ** 2))


def stop_probabilities(lat: Lattice, rule) -> tuple[np.ndarray, str]:
    if isinstance(rule, KCaveBarrier):
        _check(lat, rule.lattice)
        s = rule.stop_matrix().copy()
        kind = "barrier"
    elif isinstance(rule, StoppingLaw):
        _check(lat, rule.lattice)
        inflow = rule.inflow()
        s = np.ones_like(inflow)
        on = inflow > 0.0
        s[on] = np.clip(rule.q[on] / inflow[on], 0.0, 1.0)
        kind = "law"
    else:
        raise RuleMismatch(f"unsupported rule {type(rule).__name__}")
    s[[0, -1], :] = 1.0
    s[:, -1] = 1.0  # forced absorption at T_max
    return s, kind


def expected_counts(lat: Lattice, rule) -> np.ndarray:
    """Exact stop probability per node of the simulated rule, forced absorption included."""
    s, _ = stop_probabilities(lat, rule)
    q = np.zeros_like(s)
    cur = np.zeros(lat.L + 1)
    cur[lat.row(lat.j_star)] = 1.0
    for t in range(s.shape[1]):
        q[:, t] = cur * s[:, t]
        run = cur - q[:, t]
        cur = np.zeros_like(cur)
        cur[1:] += lat.up_prob * run[:-1]
        cur[:-1] += lat.down_prob * run[1:]
    return q


def _check(lat: Lattice, other: Lattice) -> None:
    if other is lat:
        return
    same = (other.N == lat.N and other.model == lat.model and other.j0 == lat.j0
            and other.L == lat.L and other.T_max == lat.T_max and other.j_star == lat.j_star)
    if not same:
        raise RuleMismatch("rule was built on a different lattice")


def _run_chunk(s: np.ndarray, lat: Lattice, seed: int, chunk: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[seed, chunk]))
    counts = np.zeros_like(s, dtype=np.int64)
    row = np.full(CHUNK, lat.row(lat.j_star), dtype=np.int64)
    alive = np.zeros(CHUNK, dtype=bool)
    alive[:n] = True
    up = lat.up_prob
    for t in range(s.shape[1]):
        u = gen.random((2, CHUNK))
        stop = alive & (u[0] < s[row, t])
        np.add.at(counts[:, t], row[stop], 1)
        alive &= ~stop
        if not alive.any():
            break
        row = np.where(alive, row + np.where(u[1] < up, 1, -1), row)
    return counts


def run_paths(lat: Lattice, rule, n_paths: int, seed: int, *, workers: int = 1) -> PathStats:
    s, kind = stop_probabilities(lat, rule)
    n_chunks = math.ceil(n_paths / CHUNK)
    sizes = [min(CHUNK, n_paths - c * CHUNK) for c in range(n_chunks)]
    total = np.zeros_like(s, dtype=np.int64)
    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = pool.map(lambda c: _run_chunk(s, lat, seed, c, sizes[c]), range(n_chunks))
            for part in parts:
                total += part
    else:
        for c in range(n_chunks):
            total += _run_chunk(s, lat, seed, c, sizes[c])
    return PathStats(n_paths, total, seed, kind, lat.F)


def mc_price(st: PathStats) -> tuple[float, float]:
    n = st.n_paths
    if n == 0:
        return 0.0, 0.0
    mean = st.payoff_sum / n
    if n == 1:
        return mean, 0.0
    var = max(st.payoff_sq_sum - n * mean * mean, 0.0) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass
class LawDistanceReport:
    max_deviation: float
    w1: float
    chi2: float
    dof: int
    p_value: float
    unexpected_mass: float  # empirical mass on levels the target does not charge

    def flags(self, level: float = 0.01) -> bool:
        return self.unexpected_mass > 0.0 or self.p_value < level

    def to_json(self) -> dict:
        return {"max_deviation": self.max_deviation, "w1": self.w1, "chi2": self.chi2,
                "dof": self.dof, "p_value": self.p_value,
                "unexpected_mass": self.unexpected_mass}


def compare_law(st: PathStats, dm) -> LawDistanceReport:
    target = np.asarray(getattr(dm, "weights", dm), float)
    n = st.n_paths
    if n == 0:
        return LawDistanceReport(0.0, 0.0, 0.0, 0, 1.0, 0.0)
    obs = st.stop_counts.astype(float)
    emp = obs / n
    dev = float(np.abs(emp - target).max())
    lat = getattr(dm, "lattice", None)
    dx = np.diff(lat.x) if lat is not None else np.ones(len(target) - 1)
    w1 = float(np.sum(np.abs(np.cumsum(emp - target)[:-1]) * dx))
    on = target > 0.0
    exp = n * target[on]
    chi2 = float(np.sum((obs[on] - exp) ** 2 / exp))
    dof = int(on.sum()) - 1
    p = float(sstats.chi2.sf(chi2, dof)) if dof > 0 else 1.0
    return LawDistanceReport(dev, w1, chi2, dof, p, float(emp[~on].sum()))


def two_sample_chi2(a: PathStats, b: PathStats) -> tuple[float, int, float]:
    """Homogeneity test of the stopped level counts of two runs."""
    ca, cb = a.stop_counts.astype(float), b.stop_counts.astype(float)
    keep = (ca + cb) > 0
    if keep.sum() < 2:
        return 0.0, 0, 1.0
    res = sstats.chi2_contingency(np.vstack([ca[keep], cb[keep]]), correction=False)
    return float(res.statistic), int(res.dof), float(res.pvalue)


def stats_json(st: PathStats, dm=None, extra: dict | None = None) -> dict:
    est, se = mc_price(st)
    out = {"n_paths": st.n_paths, "estimate": est, "stderr": se,
           "law_distance": compare_law(st, dm).to_json() if dm is not None else None,
           "seed": st.seed, "rule": st.rule,
           "stop_counts": st.stop_counts.tolist(), "stop_time_sums": st.stop_time_sums.tolist()}
    if extra:
        out.update(extra)
    return out


def dumps(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
