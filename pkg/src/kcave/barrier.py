"""K-cave barriers: extraction from a stopping law, shape checks, the embedded-law
audit and the regular representative.

Per level j the barrier is a pair (l_j, r_j) with l_j <= K_j <= r_j. The walk stops
for t <= l_j and for t >= r_j and runs in between; the first and last running columns
may stop a fixed fraction of the arriving mass. r_j = T_max + 1 means the right
barrier lies beyond the grid (mass still running at T_max is handed off).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .embed_lp import StoppingLaw, inflow_of
from .errors import RegularizationChangedLaw, ShapeError
from .lattice import Lattice

log = logging.getLogger(__name__)

TOL_P = 1e-10


@dataclass(eq=False)
class KCaveBarrier:
    lattice: Lattice
    l_idx: np.ndarray  # per row; -1 means no left stopping region
    r_idx: np.ndarray  # per row; T_max + 1 means no right stopping inside the grid
    frac_left: np.ndarray  # stop probability at column l + 1
    frac_right: np.ndarray  # stop probability at column r - 1
    handoff: bool = False
    tol_p: float = TOL_P
    regular: bool = False

    @property
    def K_idx(self) -> np.ndarray:
        return self.lattice.K_idx

    @property
    def beyond(self) -> int:
        return self.lattice.T_max + 1

    def stop_matrix(self) -> np.ndarray:
        """Probability of stopping on arrival at each node."""
        lat = self.lattice
        t = np.arange(lat.T_max + 1)[None, :]
        l, r = self.l_idx[:, None], self.r_idx[:, None]
        s = ((t <= l) | (t >= r)).astype(float)
        left_col = (t == l + 1) & (l + 1 < r)
        right_col = (t == r - 1) & (r - 1 > l + 1)
        s = np.where(left_col, self.frac_left[:, None], s)
        s = np.where(right_col, self.frac_right[:, None], s)
        s[0, :] = 1.0
        s[-1, :] = 1.0
        if not self.handoff:
            s[:, -1] = 1.0
        return s

    def rows(self) -> list[dict]:
        lat = self.lattice
        out = []
        for i, (j, x) in enumerate(zip(lat.levels, lat.x)):
            r = int(self.r_idx[i])
            out.append({"level": int(j), "x": float(x), "l_time": int(self.l_idx[i]),
                        "K_time": int(self.K_idx[i]),
                        "r_time": "inf" if r >= self.beyond else r,
                        "frac_stop_left": float(self.frac_left[i]),
                        "frac_stop_right": float(self.frac_right[i])})
        return out


@dataclass
class ShapeReport:
    left: list = field(default_factory=list)  # (level, t, q) violating the inverse barrier
    right: list = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.left and not self.right

    @property
    def violations(self) -> int:
        return len(self.left) + len(self.right)

    def to_json(self) -> dict:
        return {"ok": self.ok, "violations": self.violations, "checked_nodes": self.checked,
                "left": self.left[:20], "right": self.right[:20]}


@dataclass(eq=False)
class EmbeddedLawAudit:
    """Stopped law split at the K-curve, with the handed-off mass completed to the target.

    When mass is still running at T_max, `completion` = target - stopped is what it
    must still embed. That is possible for the lattice walk exactly when the completion
    is non-negative, has the handed-off mass and mean, and dominates the handed-off
    law in convex order; the three defects below measure those conditions.
    """

    lattice: Lattice
    weights: np.ndarray  # mu-hat
    left: np.ndarray  # mass stopped at t <= K
    right: np.ndarray  # mass stopped at t > K, including the completion
    stopped: np.ndarray
    handoff: np.ndarray
    completion: np.ndarray
    target: np.ndarray | None
    max_deviation: float
    w1: float
    completion_negative: float = 0.0
    completion_mass_error: float = 0.0
    completion_mean_error: float = 0.0
    completion_convex_gap: float = 0.0
    on_curve: np.ndarray | None = None  # mass stopped exactly at t = K, part of both barriers
    tol_p: float = TOL_P

    def supp(self, tol: float | None = None) -> np.ndarray:
        return np.flatnonzero(self.weights > (self.tol_p if tol is None else tol))

    def supp_l(self, tol: float | None = None) -> np.ndarray:
        return np.flatnonzero(self.left > (self.tol_p if tol is None else tol))

    def supp_r(self, tol: float | None = None) -> np.ndarray:
        return np.flatnonzero(self.right > (self.tol_p if tol is None else tol))

    @property
    def completion_defect(self) -> float:
        return max(self.completion_negative, self.completion_mass_error,
                   self.completion_mean_error, self.completion_convex_gap)

    def to_json(self) -> dict:
        lat = self.lattice
        return {
            "levels": [int(j) for j in lat.levels],
            "mu_hat": self.weights.tolist(), "mu_left": self.left.tolist(),
            "mu_right": self.right.tolist(), "handoff_mass": float(self.handoff.sum()),
            "max_deviation": self.max_deviation, "w1": self.w1,
            "completion": {"negative": self.completion_negative,
                           "mass_error": self.completion_mass_error,
                           "mean_error": self.completion_mean_error,
                           "convex_order_gap": self.completion_convex_gap},
        }


def _first_last(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    any_ = mask.any(axis=1)
    W = mask.shape[1]
    first = np.where(any_, mask.argmax(axis=1), W)
    last = np.where(any_, W - 1 - mask[:, ::-1].argmax(axis=1), -1)
    return first, last


def extract_barrier(law: StoppingLaw, lat: Lattice, tol_p: float = TOL_P) -> KCaveBarrier:
    p, q = law.p, law.q
    inflow = law.inflow()
    K = lat.K_idx
    run = p > tol_p
    first, last = _first_last(run)
    has = first <= last
    l = np.where(has, np.minimum(first - 1, K), K)
    r = np.where(has, np.maximum(last + 1, K), K)
    handoff = law.handoff is not None
    reached = inflow > tol_p
    gaps = []
    frac_l = np.zeros(lat.L + 1)
    frac_r = np.zeros(lat.L + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(reached, q / inflow, 0.0)
    for i in range(1, lat.L):
        if not has[i]:
            continue
        a, b = l[i] + 1, r[i] - 1  # running columns
        inside = np.flatnonzero(reached[i, a:b + 1] & ~run[i, a:b + 1]) + a
        if len(inside):
            gaps.append((int(lat.levels[i]), int(inside[0])))
        if reached[i, a]:
            frac_l[i] = ratio[i, a]
        if b > a and b <= lat.T_max and reached[i, b]:
            frac_r[i] = ratio[i, b]
    if gaps:
        raise ShapeError(f"running region is not an interval at (level, t) = {gaps[:5]}")
    return KCaveBarrier(lat, l.astype(np.int64), r.astype(np.int64), frac_l, frac_r,
                        handoff=handoff, tol_p=tol_p)


def barrier_law(b: KCaveBarrier) -> StoppingLaw:
    """The stopping law the barrier induces, by exact forward propagation."""
    lat = b.lattice
    s = b.stop_matrix()
    W = lat.T_max + 1
    p = np.zeros((lat.L + 1, W))
    q = np.zeros((lat.L + 1, W))
    arrive = np.zeros(lat.L + 1)
    arrive[lat.row(lat.j_star)] = 1.0
    up, dn = lat.up_prob, lat.down_prob
    for t in range(W):
        q[:, t] = arrive * s[:, t]
        p[:, t] = arrive - q[:, t]
        nxt = np.zeros(lat.L + 1)
        nxt[1:] += up * p[:-1, t]
        nxt[:-1] += dn * p[1:, t]
        arrive = nxt
    rest = p[:, -1].copy() if b.handoff else None
    return StoppingLaw(lat, p, q, rest)


def barrier_mismatch(b: KCaveBarrier, law: StoppingLaw) -> float:
    """Largest nodewise difference in stopped mass between the barrier and the law."""
    return float(np.max(np.abs(barrier_law(b).q - law.q)))


def verify_shape(law: StoppingLaw, lat: Lattice, tol_p: float = TOL_P,
                 tol_q: float | None = None) -> ShapeReport:
    """Check both barrier implications at every node that stops mass.

    Left of the curve (t < K) a stop forbids running at earlier times of that level;
    right of it (t > K) a stop forbids running later.
    """
    tol_q = tol_p if tol_q is None else tol_q
    run = law.p > tol_p
    first, last = _first_last(run)
    K = lat.K_idx[:, None]
    t = np.arange(lat.T_max + 1)[None, :]
    stops = law.q > tol_q
    left = stops & (t < K) & (first[:, None] < t)
    right = stops & (t > K) & (last[:, None] > t)

    def listing(mask):
        return [(int(lat.j0 + i), int(tt), float(law.q[i, tt])) for i, tt in np.argwhere(mask)]

    return ShapeReport(listing(left), listing(right), int(stops.sum()))


def potential_function(x: np.ndarray, weights: np.ndarray, at: np.ndarray) -> np.ndarray:
    return np.abs(at[:, None] - x[None, :]) @ weights


def embedded_measure(law: StoppingLaw, lat: Lattice, target=None,
                     tol_p: float = TOL_P) -> EmbeddedLawAudit:
    target = getattr(target, "weights", target)
    K = lat.K_idx[:, None]
    t = np.arange(lat.T_max + 1)[None, :]
    q = law.q
    left = np.where(t <= K, q, 0.0).sum(axis=1)
    right = np.where(t > K, q, 0.0).sum(axis=1)
    stopped = left + right
    on_curve = np.where(t == K, q, 0.0).sum(axis=1)
    pi = np.zeros(lat.L + 1) if law.handoff is None else law.handoff.copy()
    x = lat.x
    defects = dict(completion_negative=0.0, completion_mass_error=0.0,
                   completion_mean_error=0.0, completion_convex_gap=0.0)
    if target is None:
        completion = np.zeros(lat.L + 1)
        if pi.sum() > tol_p:
            log.warning("%.3e of mass is still running at T_max and no target was given", pi.sum())
    else:
        rho = np.asarray(target, float) - stopped
        completion = np.maximum(rho, 0.0)
        defects["completion_negative"] = float(max(0.0, -rho.min()))
        defects["completion_mass_error"] = abs(float(rho.sum() - pi.sum()))
        defects["completion_mean_error"] = abs(float(x @ rho - x @ pi))
        gap = potential_function(x, pi, x) - potential_function(x, rho, x)
        defects["completion_convex_gap"] = float(max(0.0, gap.max(initial=0.0)))
    right = right + completion
    mu_hat = left + right
    if target is None:
        dev, w1 = float("nan"), float("nan")
    else:
        diff = mu_hat - np.asarray(target, float)
        dev = float(np.abs(diff).max())
        w1 = float(np.sum(np.abs(np.cumsum(diff)[:-1]) * np.diff(x)))
    return EmbeddedLawAudit(lat, mu_hat, left, right, stopped, pi, completion,
                            None if target is None else np.asarray(target, float), dev, w1,
                            tol_p=tol_p, on_curve=on_curve, **defects)


def regularize(b: KCaveBarrier, audit: EmbeddedLawAudit, tol: float = 1e-12) -> KCaveBarrier:
    """Regular representative: l non-decreasing in level and l = K = r off the support hull.

    Only left regions that stop nothing are moved, and l stays below the first time
    the walk arrives there, so the stopped law cannot change; a re-propagation
    confirms it. The absorbing edge rows are left alone.
    """
    lat = b.lattice
    l, r = b.l_idx.copy(), b.r_idx.copy()
    fl, fr = b.frac_left.copy(), b.frac_right.copy()
    K = lat.K_idx
    supp = audit.supp()
    before = barrier_law(b)
    arrive = before.inflow() > b.tol_p
    first_arrival = np.where(arrive.any(axis=1), arrive.argmax(axis=1), lat.T_max + 1)
    outside = np.zeros(lat.L + 1, dtype=bool)
    if len(supp):
        lo, hi = supp[0], supp[-1]
        outside = (np.arange(lat.L + 1) < lo) | (np.arange(lat.L + 1) > hi)
        outside &= first_arrival > lat.T_max
        l[outside], r[outside] = K[outside], K[outside]
        fl[outside], fr[outside] = 0.0, 0.0
    # a left region the walk never reaches stops nothing, so any l below the first
    # arrival gives the same law; take the running maximum of the active l's below
    running = -1
    for i in range(1, lat.L):
        if outside[i]:
            continue
        inert = first_arrival[i] > l[i] + (1 if fl[i] > 0 else 0)
        if inert:
            new = min(running, K[i], first_arrival[i] - 1)
            if new != l[i]:
                l[i] = new
                fl[i] = 0.0
        else:
            running = max(running, l[i])
    out = KCaveBarrier(lat, l, r, fl, fr, handoff=b.handoff, tol_p=b.tol_p, regular=True)
    change = float(np.max(np.abs(barrier_law(out).q - before.q)))
    if change > tol:
        raise RegularizationChangedLaw(f"regularisation moved {change:.3e} of stopped mass")
    return out


def write_barrier_csv(b: KCaveBarrier, path) -> None:
    cols = ["level", "x", "l_time", "K_time", "r_time", "frac_stop_left", "frac_stop_right"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in b.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def barrier_distance(a: KCaveBarrier, b: KCaveBarrier, levels: np.ndarray) -> int:
    """Largest difference in time steps of l or r over the given rows; handoff counts as T_max + 1."""
    if len(levels) == 0:
        return 0
    cap = a.lattice.T_max + 1
    dl = np.abs(a.l_idx[levels] - b.l_idx[levels])
    dr = np.abs(np.minimum(a.r_idx[levels], cap) - np.minimum(b.r_idx[levels], cap))
    return int(max(dl.max(), dr.max()))


def right_support_gaps(audit: EmbeddedLawAudit, tol: float | None = None) -> np.ndarray:
    """Rows of supp(mu-hat) without right-hand stopping mass, absorbing edge rows excepted.

    The edge rows stop everything on arrival, so their barrier degenerates to l = K = r
    and the right barrier there is the whole level. Mass stopped on the K-curve itself
    counts for both sides.
    """
    supp = audit.supp(tol)
    tol = audit.tol_p if tol is None else tol
    curve = audit.on_curve if audit.on_curve is not None else np.zeros_like(audit.right)
    right = audit.right + curve > tol
    L = audit.lattice.L
    return np.array([i for i in supp if not right[i] and i not in (0, L)], dtype=int)
