"""Superhedging certificate built from a barrier, and its dual-side counterpart.

Barrier side: M[j,t] is the expected time increment of the payoff at the exit time of
the running region, G*[j,t] = -sum_{s=t}^{r_j-1} M[j,s], and
Gamma[j] = F[j,l_j] - G*[j,l_j]. The superhedge value is S = G* + Gamma^+.

The time increment is taken forward, F[j,t+1] - F[j,t]. With it S >= F holds exactly
at every node: S - F is non-decreasing in t up to K - 1 and non-increasing from K on,
and is >= 0 at both barriers. A backward increment is available for comparison.

Dual side: eta~ = eta + F and H with  up*H[j+1] + down*H[j-1] - H[j] = nu[j]  give the
exact lattice superhedge  G = eta~ - H  (a supermartingale, a martingale where the
walk runs) with  G(j*,0) + E_mu[H] = D.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .barrier import EmbeddedLawAudit, KCaveBarrier
from .embed_lp import DualCertificate, StoppingLaw, reachable_nodes
from .lattice import Lattice, kernel_value

log = logging.getLogger(__name__)

# tol_Gamma(N) = GAMMA_TOL_C / sqrt(N); calibrated on the two-atom target (see tests)
GAMMA_TOL_C = 0.5


def tol_gamma(N: int, c: float = GAMMA_TOL_C) -> float:
    return c / math.sqrt(N)


def _F_ext(lat: Lattice) -> np.ndarray:
    """Payoff grid with one extra column, so forward increments exist at T_max."""
    F = np.zeros((lat.L + 1, lat.T_max + 2))
    F[:, :-1] = lat.F
    if not lat.strike_vanishes:
        h = kernel_value(lat.model, lat.N, lat.beta, lat.levels, lat.T_max + 1)
        F[:, -1] = np.maximum(h - lat.k, 0.0)
    return F


def payoff_increment(lat: Lattice, convention: str = "forward") -> np.ndarray:
    F = _F_ext(lat)
    if convention == "forward":
        return F[:, 1:] - F[:, :-1]
    if convention == "backward":
        d = np.zeros((lat.L + 1, lat.T_max + 1))
        d[:, 1:] = F[:, 1:-1] - F[:, :-2]
        d[:, 0] = d[:, 1]
        return d
    raise ValueError("convention must be 'forward' or 'backward'")


def compute_M(lat: Lattice, b: KCaveBarrier, convention: str = "forward") -> np.ndarray:
    """Backward induction: stop with the barrier's probability, else average the next column."""
    dF = payoff_increment(lat, convention)
    s = b.stop_matrix()
    if b.handoff:
        # beyond the grid the payoff no longer moves
        s = s.copy()
    M = np.zeros((lat.L + 1, lat.T_max + 1))
    up, dn = lat.up_prob, lat.down_prob
    nxt = np.zeros(lat.L + 1)
    for t in range(lat.T_max, -1, -1):
        cont = np.zeros(lat.L + 1)
        cont[1:-1] = up * nxt[2:] + dn * nxt[:-2]
        M[:, t] = s[:, t] * dF[:, t] + (1.0 - s[:, t]) * cont
        nxt = M[:, t]
    return M


def compute_Gstar(M: np.ndarray, b: KCaveBarrier) -> np.ndarray:
    W = M.shape[1]
    t = np.arange(W)[None, :]
    inside = t < np.minimum(b.r_idx, W)[:, None]
    Mm = np.where(inside, M, 0.0)
    tail = np.cumsum(Mm[:, ::-1], axis=1)[:, ::-1]
    return -tail


def compute_gamma(lat: Lattice, b: KCaveBarrier, M: np.ndarray) -> np.ndarray:
    G = compute_Gstar(M, b)
    l = np.clip(b.l_idx, 0, lat.T_max)
    rows = np.arange(lat.L + 1)
    return lat.F[rows, l] - G[rows, l]


@dataclass
class GammaReport:
    max_gamma_supp: float
    max_abs_gamma_left: float
    gamma_condition: bool  # Gamma >= 0 on supp(mu_l) and <= 0 on supp(mu_r)
    refined_condition: bool  # Gamma <= 0 on supp(mu) and = 0 on supp(mu_l)
    tol: float
    worst_level: int | None = None

    @property
    def ok(self) -> bool:
        return self.refined_condition

    def to_json(self) -> dict:
        return {"max_gamma_on_support": self.max_gamma_supp,
                "max_abs_gamma_on_left_support": self.max_abs_gamma_left,
                "gamma_condition": self.gamma_condition,
                "refined_gamma_condition": self.refined_condition, "tol": self.tol,
                "worst_level": self.worst_level, "ok": self.ok}


def verify_gamma_condition(Gamma: np.ndarray, audit: EmbeddedLawAudit, tol: float) -> GammaReport:
    lat = audit.lattice
    supp, supp_l, supp_r = audit.supp(), audit.supp_l(), audit.supp_r()
    mx = float(Gamma[supp].max(initial=-np.inf)) if len(supp) else 0.0
    ml = float(np.abs(Gamma[supp_l]).max(initial=0.0))
    weak = bool(np.all(Gamma[supp_l] >= -tol) and np.all(Gamma[supp_r] <= tol))
    refined = bool(mx <= tol and ml <= tol)
    worst = None
    if len(supp):
        score = np.where(np.isin(np.arange(lat.L + 1), supp_l), np.abs(Gamma), Gamma)
        worst = int(lat.levels[supp[np.argmax(score[supp])]])
    return GammaReport(max(mx, 0.0) if len(supp) else 0.0, ml, weak, refined, tol, worst)


@dataclass(eq=False)
class HedgePortfolio:
    lattice: Lattice
    M: np.ndarray
    Gstar: np.ndarray
    Gamma: np.ndarray
    H: np.ndarray  # static leg Gamma^+ per level
    convention: str = "forward"
    tol: float = 0.0

    @property
    def S(self) -> np.ndarray:
        return self.Gstar + self.H[:, None]

    def superhedge_value(self) -> float:
        return float(self.S[self.lattice.row(self.lattice.j_star), 0])


def superhedge_portfolio(Gstar: np.ndarray, Gamma: np.ndarray, lat: Lattice, M: np.ndarray,
                         convention: str = "forward") -> HedgePortfolio:
    return HedgePortfolio(lat, M, Gstar, Gamma, np.maximum(Gamma, 0.0), convention)


def build_hedge(lat: Lattice, b: KCaveBarrier, convention: str = "forward") -> HedgePortfolio:
    M = compute_M(lat, b, convention)
    G = compute_Gstar(M, b)
    return superhedge_portfolio(G, compute_gamma(lat, b, M), lat, M, convention)


def kernel_drift(lat: Lattice, V: np.ndarray) -> np.ndarray:
    """E[V(next)] - V on interior rows for t < T_max; zero elsewhere."""
    out = np.zeros_like(V)
    out[1:-1, :-1] = lat.up_prob * V[2:, 1:] + lat.down_prob * V[:-2, 1:] - V[1:-1, :-1]
    return out


@dataclass
class SuperhedgeReport:
    domination: float  # max (F - S), must be <= slack
    left_equality: float  # max |S - F| at (j, l_j) with Gamma >= 0 on supp(mu_l)
    right_equality: float  # same at (j, r_j) with Gamma <= 0 on supp(mu_r)
    supermartingale: float  # max positive drift of the trading part
    martingale: float  # max |drift| of the trading part on running nodes
    value: float
    side: str = "barrier"
    slack: float = 1e-12
    tol: float = 1e-10
    details: dict = field(default_factory=dict)

    @property
    def dominates(self) -> bool:
        return self.domination <= self.slack

    @property
    def boundary_ok(self) -> bool:
        return max(self.left_equality, self.right_equality) <= self.tol

    @property
    def drift_ok(self) -> bool:
        return max(self.supermartingale, self.martingale) <= self.tol

    @property
    def ok(self) -> bool:
        return self.dominates and self.boundary_ok and self.drift_ok

    def to_json(self) -> dict:
        return {"side": self.side, "domination_excess": self.domination,
                "left_equality": self.left_equality, "right_equality": self.right_equality,
                "supermartingale_excess": self.supermartingale,
                "martingale_defect": self.martingale, "value": self.value,
                "dominates": self.dominates, "boundary_ok": self.boundary_ok,
                "drift_ok": self.drift_ok, "ok": self.ok, **self.details}


def _boundary_equalities(lat, b, S, Gamma, audit) -> tuple[float, float]:
    rows = np.arange(lat.L + 1)
    l = np.clip(b.l_idx, 0, lat.T_max)
    r = np.clip(b.r_idx, 0, lat.T_max)
    gap_l = np.abs(S[rows, l] - lat.F[rows, l])
    gap_r = np.abs(S[rows, r] - lat.F[rows, r])
    sl = audit.supp_l()
    sr = audit.supp_r()
    sl = sl[Gamma[sl] >= 0]
    sr = sr[(Gamma[sr] <= 0) & (b.r_idx[sr] <= lat.T_max)]
    return float(gap_l[sl].max(initial=0.0)), float(gap_r[sr].max(initial=0.0))


def static_leg(lat: Lattice, drift: np.ndarray, running: np.ndarray) -> np.ndarray:
    """Level function H whose one-step drift matches the mean running drift of S per level.

    S itself is the sum of a trading part and a static part; the trading part is
    G = S - H with H solving the discrete Poisson equation for the running drift.
    """
    a = np.zeros(lat.L + 1)
    for i in range(1, lat.L):
        cols = np.flatnonzero(running[i])
        if len(cols):
            a[i] = float(drift[i, cols].mean())
    return solve_static(lat, a)


def solve_static(lat: Lattice, a: np.ndarray) -> np.ndarray:
    """H with up*H[j+1] + down*H[j-1] - H[j] = a[j] on interior rows, H = 0 at j* and j*-1."""
    H = np.zeros(lat.L + 1)
    s = lat.row(lat.j_star)
    up, dn = lat.up_prob, lat.down_prob
    for i in range(s, lat.L):
        H[i + 1] = (a[i] + H[i] - dn * H[i - 1]) / up
    for i in range(s - 1, 0, -1):
        H[i - 1] = (a[i] + H[i] - up * H[i + 1]) / dn
    return H


def verify_superhedge(hp: HedgePortfolio, lat: Lattice, b: KCaveBarrier,
                      audit: EmbeddedLawAudit, *, slack: float = 1e-12,
                      tol: float = 1e-10) -> SuperhedgeReport:
    """Domination and boundary equalities for S = G* + Gamma^+, plus the drift of S.

    The drift check is made on S - H where H is the static leg fitted to the running
    drift; `details` records the raw drift of S and the spread of the running drift
    within each level, which is what the static leg cannot absorb.
    """
    S = hp.S
    dom = float(np.max(lat.F - S))
    le, re = _boundary_equalities(lat, b, S, hp.Gamma, audit)
    running = b.stop_matrix() < 1.0
    running[:, -1] = False
    running[[0, -1], :] = False
    drift = kernel_drift(lat, S)
    H = static_leg(lat, drift, running)
    Gd = kernel_drift(lat, S - H[:, None])
    Gd[[0, -1], :] = 0.0
    Gd[:, -1] = 0.0
    sup = float(max(0.0, Gd.max()))
    mart = float(np.abs(np.where(running, Gd, 0.0)).max(initial=0.0))
    raw = np.where(running, drift, 0.0)
    s0 = lat.row(lat.j_star)
    value = hp.superhedge_value() - H[s0] + float(audit.weights @ H)
    details = {"raw_drift_max": float(drift[1:-1, :-1].max(initial=0.0)),
               "S_at_start": hp.superhedge_value(),
               "raw_running_drift_abs": float(np.abs(raw).max(initial=0.0)),
               "convention": hp.convention}
    return SuperhedgeReport(dom, le, re, sup, mart, value, "barrier", slack, tol,
                            details)


@dataclass(eq=False)
class DualHedge:
    lattice: Lattice
    eta_tilde: np.ndarray
    H: np.ndarray
    G: np.ndarray
    gamma_dual: np.ndarray
    value: float  # G(j*,0) + E_mu[H]
    mask: np.ndarray  # nodes carrying a dual multiplier


def _parity_ok(lat: Lattice, j: np.ndarray, t: np.ndarray) -> np.ndarray:
    return ((j - lat.j_star + t) % 2) == 0


def extend_eta(cert: DualCertificate, lat: Lattice) -> np.ndarray:
    """eta on the whole parity class of the start node.

    Nodes the walk cannot reach carry no dual row; they get the smallest value that
    keeps eta + F dual feasible, eta~ = max(F, E[eta~ next] - nu), computed backwards.
    """
    eta = cert.eta.copy()
    T = lat.T_max
    js = np.arange(lat.L + 1)
    et = eta + lat.F
    for t in range(T - 1, -1, -1):
        off = np.abs(lat.levels - lat.j_star) > t
        off &= ((lat.levels - lat.j_star + t) % 2) == 0
        off[[0, -1]] = False
        if not off.any():
            continue
        i = js[off]
        cont = lat.up_prob * et[i + 1, t + 1] + lat.down_prob * et[i - 1, t + 1] - cert.nu[i]
        et[i, t] = np.maximum(lat.F[i, t], cont)
    return et - lat.F


def dual_to_hedge(cert: DualCertificate, lat: Lattice, b: KCaveBarrier,
                  target: np.ndarray) -> DualHedge:
    """eta~ = eta + F, Gamma from eta at the two barriers, and H from nu.

    eta lives on parity-reachable nodes only, so the barrier columns are moved to the
    nearest reachable column inside the respective stopping region.
    """
    target = np.asarray(getattr(target, "weights", target), float)
    eta_t = extend_eta(cert, lat) + lat.F
    H = solve_static(lat, cert.nu)
    G = eta_t - H[:, None]
    mask = np.zeros_like(eta_t, dtype=bool)
    js, ts = reachable_nodes(lat, lat.T_max - 1)
    mask[js - lat.j0, ts] = True
    levels = lat.levels
    l = np.clip(b.l_idx, 0, lat.T_max)
    l = np.where(_parity_ok(lat, levels, l) | (l == 0), l, np.maximum(l - 1, 0))
    r = b.r_idx.copy()
    r = np.where(_parity_ok(lat, levels, r), r, r + 1)
    rows = np.arange(lat.L + 1)
    eta = eta_t - lat.F
    eta_r = np.where(r <= lat.T_max, eta[rows, np.clip(r, 0, lat.T_max)], 0.0)
    gamma_dual = eta_r - eta[rows, l]
    s = lat.row(lat.j_star)
    value = float(G[s, 0] + target @ H)
    return DualHedge(lat, eta_t, H, G, gamma_dual, value, mask)


def verify_dual_hedge(dh: DualHedge, law: StoppingLaw, *, slack: float = 1e-12,
                      tol: float = 1e-10, tol_p: float = 1e-10) -> SuperhedgeReport:
    """Exact lattice certificate: eta~ >= F, eta~ = F where mass stops, and G = eta~ - H
    a supermartingale that is a martingale where the walk runs."""
    lat = dh.lattice
    m = dh.mask
    dom = float(np.max(np.where(m, lat.F - dh.eta_tilde, -np.inf), initial=0.0))
    stops = m & (law.q > tol_p)
    eq = float(np.abs(np.where(stops, dh.eta_tilde - lat.F, 0.0)).max(initial=0.0))
    drift = kernel_drift(lat, dh.G)
    sup = float(max(0.0, np.where(m, drift, -np.inf).max(initial=0.0)))
    running = m & (law.p > tol_p)
    running[:, -1] = False
    mart = float(np.abs(np.where(running, drift, 0.0)).max(initial=0.0))
    return SuperhedgeReport(max(dom, 0.0), eq, eq, sup, mart, dh.value, "dual", slack, tol)


def gamma_agreement(Gamma: np.ndarray, gamma_dual: np.ndarray, audit: EmbeddedLawAudit) -> float:
    supp = audit.supp()
    return float(np.abs(Gamma[supp] - gamma_dual[supp]).max(initial=0.0))


def hedge_json(hp: HedgePortfolio, reports: dict) -> dict:
    return {"M": hp.M.tolist(), "Gstar": hp.Gstar.tolist(), "Gamma": hp.Gamma.tolist(),
            "superhedge_value": hp.superhedge_value(), "convention": hp.convention,
            "reports": reports}


def write_gamma_csv(lat: Lattice, Gamma: np.ndarray, gamma_dual: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "x", "gamma", "gamma_dual"])
        for j, x, g, gd in zip(lat.levels, lat.x, Gamma, gamma_dual):
            w.writerow([int(j), repr(float(x)), repr(float(g)), repr(float(gd))])


def time_zero_split(lat: Lattice, weights: np.ndarray) -> KCaveBarrier:
    """Alternative embedding: stop the start atom's mass at time 0, send the rest to the edges.

    This moves the stopping at the start level from its right barrier to time 0 and
    embeds the target exactly when it lives on the start level and the two edge rows.
    """
    w = np.asarray(getattr(weights, "weights", weights), float)
    s = lat.row(lat.j_star)
    inner = np.ones(lat.L + 1, dtype=bool)
    inner[[0, lat.L, s]] = False
    if np.any(w[inner] > 0.0):
        raise ValueError("target must be carried by the start level and the two edge rows")
    L, K = lat.L, lat.K_idx
    l = np.full(L + 1, -1)
    r = np.full(L + 1, lat.T_max + 1)
    l[[0, L]] = K[[0, L]]
    r[[0, L]] = K[[0, L]]
    fl = np.zeros(L + 1)
    fl[s] = w[s]
    return KCaveBarrier(lat, l, r, fl, np.zeros(L + 1), handoff=True)


def law_value(law: StoppingLaw, lat: Lattice) -> float:
    return float((law.q * lat.F).sum())
