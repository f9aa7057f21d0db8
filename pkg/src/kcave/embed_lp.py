"""The discretised optimal embedding problem as a linear programme.

Variables are the continuation probabilities p[j, t] of the stopped walk at
interior levels. Every variable has a flow row p[j,t] <= inflow[j,t] whose
multiplier is eta[j,t], and every interior level has an occupation row
sum_t p[j,t] <= U_j whose multiplier is nu[j]. The walk may stop at t = 0,
which makes the point-mass target feasible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import (HorizonError, InfeasibleError, MaxIterationsError, NegativeMassError,
                     SizeError)
from .lattice import Lattice
from .simplex import PivotRule, Simplex, SimplexResult

log = logging.getLogger(__name__)

NNZ_CAP = 5_000_000


@dataclass(eq=False)
class LPInstance:
    """max c0 + c @ p  subject to  A @ p <= b,  lo <= p <= hi."""

    lattice: Lattice
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    c0: float
    lo: np.ndarray
    hi: np.ndarray
    var_j: np.ndarray
    var_t: np.ndarray
    row_kind: np.ndarray  # 0 = flow row of variable row_var, 1 = occupation row of level row_level
    row_var: np.ndarray
    row_level: np.ndarray
    U: np.ndarray
    horizon: int  # last column holding p variables; the walk stops by horizon + 1
    handoff: bool = False  # True if mass alive at `horizon` leaves the grid unstopped
    index: dict = field(default_factory=dict, repr=False)
    target: np.ndarray | None = None  # mu^N per level, needed to select an embedding

    @property
    def n_vars(self) -> int:
        return len(self.c)

    @property
    def n_rows(self) -> int:
        return len(self.b)

    def row_tags(self) -> list[tuple]:
        tags = []
        for kind, v, j in zip(self.row_kind, self.row_var, self.row_level):
            if kind == 0:
                tags.append(("flow", int(self.var_j[v]), int(self.var_t[v])))
            else:
                tags.append(("occupation", int(j)))
        return tags


@dataclass(eq=False)
class StoppingLaw:
    lattice: Lattice
    p: np.ndarray  # shape (L+1, T_max+1), zero on boundary rows
    q: np.ndarray  # shape (L+1, T_max+1); boundary rows hold absorption
    handoff: np.ndarray | None = None  # mass still running after T_max, per level
    clamp: float = 0.0

    def inflow(self) -> np.ndarray:
        return inflow_of(self.lattice, self.p)

    @property
    def stopped(self) -> np.ndarray:
        return self.q.sum(axis=1)


@dataclass(eq=False)
class DualCertificate:
    lattice: Lattice
    nu: np.ndarray  # length L+1, zero on boundary levels
    eta: np.ndarray  # shape (L+1, T_max+1)
    value: float


def reachable_nodes(lat: Lattice, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    js, ts = [], []
    for t in range(horizon + 1):
        lo = max(lat.j0 + 1, lat.j_star - t)
        hi = min(lat.jL - 1, lat.j_star + t)
        start = lo + ((lo - lat.j_star + t) % 2)
        j = np.arange(start, hi + 1, 2)
        js.append(j)
        ts.append(np.full(len(j), t))
    return np.concatenate(js), np.concatenate(ts)


def inflow_of(lat: Lattice, p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    out[lat.row(lat.j_star), 0] = 1.0
    out[1:, 1:] += lat.up_prob * p[:-1, :-1]
    out[:-1, 1:] += lat.down_prob * p[1:, :-1]
    return out


def assemble(lat: Lattice, U: np.ndarray, T_max: int | None = None, *, handoff: bool = False,
             target: np.ndarray | None = None, nnz_cap: int = NNZ_CAP) -> LPInstance:
    """Build the LP. Without `handoff` the last column T_max absorbs all mass; with
    it, p[., T_max] are variables whose mass continues beyond the grid."""
    T_max = lat.T_max if T_max is None else int(T_max)
    if T_max > lat.T_max or (handoff and T_max != lat.T_max):
        raise ValueError("T_max must not exceed the lattice horizon (and equal it with handoff)")
    if T_max < lat.T_star:
        raise HorizonError(f"T_max {T_max} is shorter than the payoff horizon {lat.T_star}")
    horizon = T_max if handoff else T_max - 1
    U = np.asarray(U, float)
    if len(U) != lat.L - 1:
        raise ValueError("U must have one entry per interior level")
    var_j, var_t = reachable_nodes(lat, horizon)
    n = len(var_j)
    nnz = 3 * n + n
    if nnz > nnz_cap:
        raise SizeError(f"{nnz} nonzeros exceeds the cap {nnz_cap}")
    index = {(int(j), int(t)): i for i, (j, t) in enumerate(zip(var_j, var_t))}
    up, down = lat.up_prob, lat.down_prob
    F = lat.F

    rows, cols, vals = [], [], []
    for i, (j, t) in enumerate(zip(var_j, var_t)):
        rows.append(i); cols.append(i); vals.append(1.0)
        if t > 0:
            a = index.get((int(j) - 1, int(t) - 1))
            if a is not None:
                rows.append(i); cols.append(a); vals.append(-up)
            b_ = index.get((int(j) + 1, int(t) - 1))
            if b_ is not None:
                rows.append(i); cols.append(b_); vals.append(-down)
    b = np.zeros(n)
    b[index[(lat.j_star, 0)]] = 1.0

    levels = np.unique(var_j)
    level_row = {}
    occ_rows = []
    for r, j in enumerate(levels):
        level_row[int(j)] = n + r
        occ_rows.append(int(j))
    rows.extend(level_row[int(j)] for j in var_j)
    cols.extend(range(n))
    vals.extend([1.0] * n)
    m = n + len(levels)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    b = np.concatenate([b, U[levels - lat.j0 - 1]])

    rj = var_j - lat.j0
    nt = var_t + 1
    nxt = np.zeros(n)
    inside = nt <= T_max
    nxt[inside] = up * F[rj[inside] + 1, nt[inside]] + down * F[rj[inside] - 1, nt[inside]]
    c = nxt - F[rj, var_t]
    c0 = float(F[lat.row(lat.j_star), 0])

    row_kind = np.concatenate([np.zeros(n, int), np.ones(len(levels), int)])
    row_var = np.concatenate([np.arange(n), np.full(len(levels), -1)])
    row_level = np.concatenate([var_j, levels])
    return LPInstance(lattice=lat, A=A, b=b, c=c, c0=c0, lo=np.zeros(n),
                      hi=np.full(n, np.inf), var_j=var_j, var_t=var_t, row_kind=row_kind,
                      row_var=row_var, row_level=row_level, U=U, horizon=horizon,
                      handoff=handoff, index=index,
                      target=None if target is None else np.asarray(target, float))


def law_from_solution(lp: LPInstance, x: np.ndarray, tol: float = 1e-9) -> StoppingLaw:
    lat = lp.lattice
    p = np.zeros((lat.L + 1, lat.T_max + 1))
    p[lp.var_j - lat.j0, lp.var_t] = np.maximum(x, 0.0)
    return derive_q(lat, p, tol, handoff=lp.handoff)


def derive_q(lat: Lattice, p: np.ndarray, tol: float = 1e-9, *, handoff: bool = False) -> StoppingLaw:
    """q = inflow - p, with the last column absorbing unless mass is handed off."""
    p = p.copy()
    p[0, :] = 0.0
    p[-1, :] = 0.0
    rest = None
    if handoff:
        rest = p[:, -1].copy()
    else:
        p[:, -1] = 0.0
    q = inflow_of(lat, p) - p
    low = float(q.min(initial=0.0))
    if low < -10 * tol:
        i, t = np.unravel_index(int(np.argmin(q)), q.shape)
        raise NegativeMassError(f"q = {low:.3e} at level {lat.j0 + i}, t = {t}")
    if low < 0:
        log.debug("clamped negative stopping mass %.3e", low)
    q = np.maximum(q, 0.0)
    return StoppingLaw(lat, p, q, rest, clamp=-low)


def dual_from_rows(lp: LPInstance, y: np.ndarray, value: float) -> DualCertificate:
    lat = lp.lattice
    eta = np.zeros((lat.L + 1, lat.T_max + 1))
    nu = np.zeros(lat.L + 1)
    flow = lp.row_kind == 0
    v = lp.row_var[flow]
    eta[lp.var_j[v] - lat.j0, lp.var_t[v]] = y[flow]
    nu[lp.row_level[~flow] - lat.j0] = y[~flow]
    return DualCertificate(lat, nu, eta, value)


def objective(lat: Lattice, law: StoppingLaw) -> float:
    return float(np.sum(lat.F * law.q))


def dual_objective(lat: Lattice, cert: DualCertificate, U: np.ndarray) -> float:
    s = lat.row(lat.j_star)
    return float(cert.eta[s, 0] + np.dot(cert.nu[1:-1], U) + lat.F[s, 0])


# ---------------------------------------------------------------------------
# solving


@dataclass(eq=False)
class Solution:
    """Optimal value, dual certificate and the selected optimal stopping law.

    `value_lp` is the problem with forced absorption at T_max; it yields P and the
    certificate. The law comes from a second programme over the optimal face that
    also asks for an exact embedding and breaks ties towards early stopping
    (`selection == "root"`); if that programme fails the law of the first one is
    returned with `selection == "value"`.
    """

    law: StoppingLaw
    cert: DualCertificate
    value: float
    dual_value: float
    value_lp: LPInstance
    selection: str
    pivot: str
    tol: float
    iterations: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    value_law: StoppingLaw | None = None
    select_lp: LPInstance | None = None

    def __iter__(self):
        return iter((self.law, self.cert, self.value))

    @property
    def gap(self) -> float:
        return duality_gap(self.value, self.dual_value)


def stopped_mass_rows(lp: LPInstance) -> tuple[sp.csr_matrix, np.ndarray]:
    """Linear map p -> stopped mass per level (all levels, boundaries included), plus constant."""
    lat = lp.lattice
    rows, cols, vals = [], [], []
    last = lp.horizon if lp.handoff else lp.horizon + 1
    for i, (j, t) in enumerate(zip(lp.var_j, lp.var_t)):
        r = int(j) - lat.j0
        rows.append(r); cols.append(i); vals.append(-1.0)
        if t < last:
            rows += [r + 1, r - 1]; cols += [i, i]; vals += [lat.up_prob, lat.down_prob]
    M = sp.csr_matrix((vals, (rows, cols)), shape=(lat.L + 1, lp.n_vars))
    const = np.zeros(lat.L + 1)
    const[lat.row(lat.j_star)] = 1.0
    return M, const


def stop_time_rows(lp: LPInstance) -> sp.csr_matrix:
    """Linear map p -> q flattened over (level, time), without the constant at (j*, 0)."""
    lat = lp.lattice
    W = lat.T_max + 1
    rows, cols, vals = [], [], []
    for i, (j, t) in enumerate(zip(lp.var_j, lp.var_t)):
        r = int(j) - lat.j0
        rows.append(r * W + t); cols.append(i); vals.append(-1.0)
        if t + 1 <= lat.T_max:
            rows += [(r + 1) * W + t + 1, (r - 1) * W + t + 1]
            cols += [i, i]
            vals += [lat.up_prob, lat.down_prob]
    return sp.csr_matrix((vals, (rows, cols)), shape=((lat.L + 1) * W, lp.n_vars))


def root_cost(lp: LPInstance) -> np.ndarray:
    """Convex time cost sum phi(t) q_{j,t} with phi(t) = (t/T)^2, written in p.

    Mass handed off at T is charged phi(T) plus phi'(T) times its expected remaining
    occupation, which is sum U minus the occupation already spent. Among optimal
    embeddings this prefers the one that stops as early as possible to the right of
    the payoff curve, which makes the selected barrier canonical.
    """
    lat = lp.lattice
    T = float(max(lp.horizon, 1))
    t = np.arange(lat.T_max + 1, dtype=float)
    phi = np.tile((t / T) ** 2, lat.L + 1)
    dphi = 2.0 / T
    cost = stop_time_rows(lp).T @ phi
    hand = (lp.var_t == lp.horizon) & lp.handoff
    cost = cost + hand * (1.0 + dphi) - dphi
    return np.asarray(cost).ravel()


def _run(c, A, b, *, pivot, tol, basis=None, max_iter=None, time_limit=None, hi=None,
         shi=None) -> SimplexResult:
    m, n = A.shape
    hi = np.full(n, np.inf) if hi is None else hi
    shi = np.full(m, np.inf) if shi is None else shi
    return Simplex(c, A, b, np.zeros(n), hi, np.zeros(m), shi, rule=pivot, tol=tol, basis=basis,
                   max_iter=max_iter, time_limit=time_limit).solve()


def solve(lp: LPInstance, tol: float = 1e-9, pivot: "PivotRule | str" = PivotRule.BLAND, *,
          select: bool = True, face_tol: float | None = None, max_iter: int | None = None,
          time_limit: float | None = None) -> Solution:
    lat = lp.lattice
    pivot = PivotRule(pivot)
    if lp.handoff:
        raise ValueError("solve expects the forced-absorption instance from assemble()")
    t0 = time.perf_counter()
    res = _run(-lp.c, lp.A, lp.b, pivot=pivot, tol=tol, max_iter=max_iter, time_limit=time_limit)
    P = lp.c0 - res.value
    cert = dual_from_rows(lp, -res.y, 0.0)
    cert.value = dual_objective(lat, cert, lp.U)
    value_law = law_from_solution(lp, res.x, tol)
    out = Solution(law=value_law, cert=cert, value=P, dual_value=cert.value, value_lp=lp,
                   selection="value", pivot=pivot.value, tol=tol, value_law=value_law)
    out.iterations["value"] = res.iterations
    out.seconds["value"] = time.perf_counter() - t0
    log.info("value LP: P=%.12g D=%.12g in %d pivots", P, cert.value, res.iterations)
    if not select or lp.target is None:
        return out
    if not lat.strike_vanishes:
        # a martingale payoff makes every embedding optimal; there is nothing to select
        log.info("strike 0: keeping the value-LP law")
        return out

    t1 = time.perf_counter()
    sel = assemble(lat, lp.U, handoff=True, target=lp.target)
    M, const = stopped_mass_rows(sel)
    A = sp.vstack([sel.A, M], format="csr")
    b = np.concatenate([sel.b, lp.target - const])
    hi, shi = _optimal_face(lp, sel, res, tol if face_tol is None else face_tol, A.shape[0])
    basis = _carry_basis(lp, sel, res.basis, A.shape[0])
    try:
        res2 = _run(root_cost(sel), A, b, pivot=pivot, tol=tol, basis=basis, max_iter=max_iter,
                    time_limit=time_limit, hi=hi, shi=shi)
    except (InfeasibleError, MaxIterationsError) as exc:
        log.warning("embedding selection failed (%s); keeping the value-LP law", exc)
        return out
    out.law = law_from_solution(sel, res2.x, tol)
    out.select_lp = sel
    out.selection = "root"
    out.iterations["select"] = res2.iterations
    out.seconds["select"] = time.perf_counter() - t1
    return out


def _optimal_face(lp: LPInstance, sel: LPInstance, res: SimplexResult, thr: float,
                  m_sel: int) -> tuple[np.ndarray, np.ndarray]:
    """Bounds restricting the selection LP to the optimal face of the value LP.

    By complementary slackness every optimum keeps variables with a strictly negative
    reduced cost at zero and rows with a positive multiplier tight. The value-LP dual,
    extended by zero on the handoff column, stays optimal for the handoff problem, so
    the same restriction describes its optimal face; handoff variables at a level with
    nu > 0 are fixed at zero too.
    """
    n_a = lp.n_vars
    hi = np.full(sel.n_vars, np.inf)
    d = -res.reduced  # reduced costs of the maximisation, <= 0 at the optimum
    hi[:n_a][d < -thr] = 0.0
    y = -res.y
    nu = np.zeros(lp.lattice.L + 1)
    occ = lp.row_kind == 1
    nu[lp.row_level[occ] - lp.lattice.j0] = y[occ]
    hand = np.flatnonzero(sel.var_t == sel.horizon)
    F = lp.lattice.F[sel.var_j[hand] - lp.lattice.j0, sel.horizon]
    hi[hand[(nu[sel.var_j[hand] - lp.lattice.j0] + F) > thr]] = 0.0
    shi = np.full(m_sel, np.inf)
    tight = np.flatnonzero(y > thr)
    row_map = np.concatenate([np.arange(n_a), sel.n_vars + np.arange(lp.n_rows - n_a)])
    shi[row_map[tight]] = 0.0
    return hi, shi


def _carry_basis(lp: LPInstance, sel: LPInstance, basis: np.ndarray, m_sel: int) -> np.ndarray:
    """Map an optimal basis of the value LP into the selection LP; new rows get their slacks.

    Variables of the value LP are a prefix of the selection LP's (same node order), so
    structural indices carry over; slack indices are shifted row by row.
    """
    n_a, n_s = lp.n_vars, sel.n_vars
    row_map = np.concatenate([np.arange(n_a), n_s + np.arange(lp.n_rows - n_a)])
    out = []
    for k in basis:
        out.append(int(k) if k < n_a else n_s + int(row_map[k - n_a]))
    used = set(out)
    for r in range(m_sel):
        if n_s + r not in used and (r >= sel.n_rows or n_a <= r < n_s):
            out.append(n_s + r)
    if len(out) != m_sel:
        return None
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class SlacknessReport:
    fcs1: float  # max p * (dual row slack)
    fcs2: float  # max q * eta
    fcs3: float  # max nu * (U - occupation)
    primal_infeasibility: float
    dual_infeasibility: float
    nodes1: list = field(default_factory=list)
    nodes2: list = field(default_factory=list)
    levels3: list = field(default_factory=list)
    tol: float = 1e-9

    @property
    def ok(self) -> bool:
        lim = 10 * self.tol
        return max(self.fcs1, self.fcs2, self.fcs3, self.primal_infeasibility,
                   self.dual_infeasibility) <= lim

    def to_json(self) -> dict:
        return {"fcs1": self.fcs1, "fcs2": self.fcs2, "fcs3": self.fcs3,
                "primal_infeasibility": self.primal_infeasibility,
                "dual_infeasibility": self.dual_infeasibility,
                "nodes1": self.nodes1[:20], "nodes2": self.nodes2[:20],
                "levels3": self.levels3[:20], "ok": self.ok}


def dual_row_slack(lat: Lattice, cert: DualCertificate) -> np.ndarray:
    """eta - E[eta next] + nu - (E[F next] - F) on interior rows; columns t < T_max."""
    eta, F = cert.eta, lat.F
    up, dn = lat.up_prob, lat.down_prob
    out = np.zeros_like(eta)
    nxt_eta = up * eta[2:, 1:] + dn * eta[:-2, 1:]
    nxt_F = up * F[2:, 1:] + dn * F[:-2, 1:]
    out[1:-1, :-1] = eta[1:-1, :-1] - nxt_eta + cert.nu[1:-1, None] - (nxt_F - F[1:-1, :-1])
    return out


def occupation(law: StoppingLaw) -> np.ndarray:
    return law.p.sum(axis=1)


def check_complementary_slackness(law: StoppingLaw, cert: DualCertificate, lat: Lattice,
                                  tol: float = 1e-9, U: np.ndarray | None = None,
                                  tol_p: float = 1e-10) -> SlacknessReport:
    s = dual_row_slack(lat, cert)
    mask = _node_mask(lat)
    p = law.p
    prod1 = np.where(mask, p * np.abs(s), 0.0)
    q_int = law.q.copy()
    prod2 = q_int * np.abs(cert.eta)
    occ = occupation(law)
    full_U = np.zeros(lat.L + 1) if U is None else np.concatenate([[0.0], U, [0.0]])
    gap3 = cert.nu * np.abs(full_U - occ) if U is not None else np.zeros(lat.L + 1)
    # primal feasibility: p <= inflow (q >= 0 is enforced by derive_q), occupation <= U
    inflow = law.inflow()
    primal = max(float(np.max(p - inflow, initial=0.0)), law.clamp)
    if U is not None:
        primal = max(primal, float(np.max(occ[1:-1] - U, initial=0.0)))
    dual = max(float(-np.min(np.where(mask, s, 0.0), initial=0.0)),
               float(-cert.eta.min(initial=0.0)), float(-cert.nu.min(initial=0.0)))

    def offenders(arr, lim):
        idx = np.argwhere(arr > lim)
        return [(int(i) + lat.j0, int(t)) for i, t in idx]

    return SlacknessReport(
        fcs1=float(prod1.max(initial=0.0)), fcs2=float(prod2.max(initial=0.0)),
        fcs3=float(gap3.max(initial=0.0)), primal_infeasibility=primal,
        dual_infeasibility=dual, nodes1=offenders(prod1, 10 * tol),
        nodes2=offenders(prod2, 10 * tol),
        levels3=[int(i) + lat.j0 for i in np.flatnonzero(gap3 > 10 * tol)], tol=tol)


def _node_mask(lat: Lattice) -> np.ndarray:
    """Parity-reachable interior nodes with t < T_max."""
    mask = np.zeros((lat.L + 1, lat.T_max + 1), dtype=bool)
    js, ts = reachable_nodes(lat, lat.T_max - 1)
    mask[js - lat.j0, ts] = True
    return mask


def duality_gap(P: float, D: float) -> float:
    return abs(P - D)


def value_bounds(lat: Lattice, weights: np.ndarray) -> tuple[float, float]:
    """Stop-now lower bound and static-call upper bound (h at time 0 dominates h later)."""
    weights = getattr(weights, "weights", weights)
    lower = float(lat.F[lat.row(lat.j_star), 0])
    upper = float(np.dot(np.maximum(lat.h[:, 0] - lat.k, 0.0), weights))
    return lower, upper


def write_mps(lp: LPInstance, path, name: str = "KCAVE") -> None:
    """Free-format MPS (ROWS/COLUMNS/RHS/RANGES/BOUNDS); objective is minimised as -c."""
    rname = ["_".join(["F" if tag[0] == "flow" else "U", *map(str, tag[1:])])
             for tag in lp.row_tags()]
    cname = [f"P_{j}_{t}" for j, t in zip(lp.var_j, lp.var_t)]
    A = lp.A.tocsc()
    with open(path, "w") as fh:
        fh.write(f"NAME {name}\n")
        fh.write(f"* constant objective term {float(lp.c0)!r}\n")
        fh.write("ROWS\n N OBJ\n")
        for r in rname:
            fh.write(f" L {r}\n")
        fh.write("COLUMNS\n")
        for k in range(lp.n_vars):
            if lp.c[k] != 0:
                fh.write(f" {cname[k]} OBJ {float(-lp.c[k])!r}\n")
            for ptr in range(A.indptr[k], A.indptr[k + 1]):
                fh.write(f" {cname[k]} {rname[A.indices[ptr]]} {float(A.data[ptr])!r}\n")
        fh.write("RHS\n")
        for r, v in zip(rname, lp.b):
            if v != 0:
                fh.write(f" RHS {r} {float(v)!r}\n")
        fh.write("ENDATA\n")
