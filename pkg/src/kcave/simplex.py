"""Bounded-variable revised primal simplex.

Solves  min c @ x  subject to  A @ x + s = b,  lo <= x <= hi,  s in [slo, shi]
where the slack bounds encode row senses (<=: [0, inf), =: [0, 0], >=: (-inf, 0]).

The basis is kept as a sparse LU factorisation (SuperLU through scipy) plus a
product-form eta file that is rebuilt every `refactor` pivots. Phase one
minimises the sum of bound violations of the basic variables, so any starting
basis works, including one carried over from a related problem.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InfeasibleError, MaxIterationsError, UnboundedError

log = logging.getLogger(__name__)

AT_LOWER, AT_UPPER, FREE_ZERO, BASIC = 0, 1, 2, 3


class PivotRule(str, Enum):
    BLAND = "bland"
    DANTZIG = "dantzig"
    STEEPEST = "steepest"


@dataclass
class SimplexResult:
    x: np.ndarray  # structural values
    slack: np.ndarray
    y: np.ndarray  # row duals: d(objective)/d(b)
    reduced: np.ndarray  # reduced costs of the structurals
    value: float
    iterations: int
    basis: np.ndarray  # indices into [structurals, slacks]
    rule: str
    phase1_iterations: int = 0
    seconds: float = 0.0
    stats: dict = field(default_factory=dict)


class _Basis:
    """LU of the basis matrix plus a product-form eta file."""

    def __init__(self, Afull: sp.csc_matrix, basic: np.ndarray, home: np.ndarray):
        self.Afull = Afull
        self.m = Afull.shape[0]
        self.home = home
        self.factor(basic)

    def factor(self, basic: np.ndarray) -> None:
        # Each column sits on its home row, so for time-ordered flow problems the basis
        # is nearly triangular and a natural-order LU has almost no fill. Columns whose
        # home row is already used go to a small trailing block with the unclaimed rows.
        order = np.lexsort((basic, self.home[basic]))
        homes = self.home[basic[order]]
        first = np.ones(len(order), dtype=bool)
        first[1:] = homes[1:] != homes[:-1]
        self.order = np.concatenate([order[first], order[~first]])
        taken = np.zeros(self.m, dtype=bool)
        taken[homes[first]] = True
        self.rowperm = np.concatenate([homes[first], np.flatnonzero(~taken)])
        B = self.Afull[:, basic[self.order]].tocsr()[self.rowperm, :].tocsc()
        self.lu = spla.splu(B, permc_spec="NATURAL", diag_pivot_thresh=0.1)
        self.etas: list[tuple[int, np.ndarray, np.ndarray, float]] = []

    def _solve(self, a: np.ndarray) -> np.ndarray:
        v = np.empty(self.m)
        v[self.order] = self.lu.solve(a[self.rowperm])
        return v

    def _solve_t(self, c: np.ndarray) -> np.ndarray:
        y = np.empty(self.m)
        y[self.rowperm] = self.lu.solve(c[self.order], trans="T")
        return y

    def ftran(self, a: np.ndarray) -> np.ndarray:
        v = self._solve(a)
        for r, idx, val, piv in self.etas:
            t = v[r] / piv
            if t != 0.0:
                v[idx] -= t * val
            v[r] = t
        return v

    def btran(self, c: np.ndarray) -> np.ndarray:
        u = c.astype(float, copy=True)
        for r, idx, val, piv in reversed(self.etas):
            u[r] = (u[r] - u[idx] @ val) / piv
        return self._solve_t(u)

    def update(self, r: int, alpha: np.ndarray) -> None:
        piv = alpha[r]
        nz = np.flatnonzero(alpha)
        nz = nz[nz != r]
        self.etas.append((r, nz, alpha[nz].copy(), piv))


class Simplex:
    def __init__(self, c, A, b, lo, hi, slo, shi, *, rule: PivotRule | str = PivotRule.BLAND,
                 tol: float = 1e-9, dual_tol: float = 1e-11, max_iter: int | None = None,
                 refactor: int = 64, basis: np.ndarray | None = None,
                 time_limit: float | None = None):
        A = sp.csc_matrix(A, dtype=float)
        self.m, self.n = A.shape
        m, n = self.m, self.n
        self.A = A
        self.Afull = sp.hstack([A, sp.identity(m, format="csc")], format="csc")
        self.AfullT = self.Afull.T.tocsr()
        # home row of a column: its first nonzero for structurals, its own row for slacks
        first = np.array([A.indices[A.indptr[j]] if A.indptr[j + 1] > A.indptr[j] else 0
                          for j in range(n)], dtype=np.int64)
        self.home = np.concatenate([first, np.arange(m)])
        self.b = np.asarray(b, float)
        self.cost = np.concatenate([np.asarray(c, float), np.zeros(m)])
        self.lo = np.concatenate([np.asarray(lo, float), np.asarray(slo, float)])
        self.hi = np.concatenate([np.asarray(hi, float), np.asarray(shi, float)])
        if np.any(self.lo > self.hi):
            raise InfeasibleError("a variable has lower bound above its upper bound")
        self.rule = PivotRule(rule)
        self.tol = tol
        # priced tighter than tol so the duals certify to 1e-10
        self.dtol = min(tol, dual_tol)
        self.ptol = 1e-9
        self.max_iter = max_iter if max_iter is not None else 50 * (m + n) + 1000
        self.refactor = refactor
        self.time_limit = time_limit
        self.iterations = 0
        self.phase1_iterations = 0

        N = n + m
        self.state = np.full(N, AT_LOWER, dtype=np.int8)
        self.z = np.zeros(N)
        for i in range(N):
            self._rest(i)
        if basis is None:
            basic = np.arange(n, n + m)
        else:
            basic = np.asarray(basis, dtype=np.int64)
        self.basic = basic.copy()
        self.state[self.basic] = BASIC
        try:
            self.B = _Basis(self.Afull, self.basic, self.home)
        except RuntimeError:
            log.info("warm basis is singular; starting from the slack basis")
            self.state[self.basic] = AT_LOWER
            for i in self.basic:
                self._rest(i)
            self.basic = np.arange(n, n + m)
            self.state[self.basic] = BASIC
            self.B = _Basis(self.Afull, self.basic, self.home)
        self._recompute_basic()
        self.weights = None
        if self.rule is PivotRule.STEEPEST:
            self._init_weights()

    def _rest(self, i: int) -> None:
        """Put a nonbasic variable at a finite bound (or 0 if free)."""
        if np.isfinite(self.lo[i]):
            self.state[i], self.z[i] = AT_LOWER, self.lo[i]
        elif np.isfinite(self.hi[i]):
            self.state[i], self.z[i] = AT_UPPER, self.hi[i]
        else:
            self.state[i], self.z[i] = FREE_ZERO, 0.0

    def _column(self, j: int) -> np.ndarray:
        a = np.zeros(self.m)
        s, e = self.Afull.indptr[j], self.Afull.indptr[j + 1]
        a[self.Afull.indices[s:e]] = self.Afull.data[s:e]
        return a

    def _recompute_basic(self, refine: int = 0) -> None:
        nb = self.state != BASIC
        rhs = self.b - self.Afull[:, nb] @ self.z[nb]
        xb = self.B.ftran(rhs)
        for _ in range(refine):
            self.z[self.basic] = xb
            resid = self.b - self.Afull @ self.z
            xb = xb + self.B.ftran(resid)
        self.z[self.basic] = xb

    def _init_weights(self) -> None:
        # reference weights 1 + ||B^-1 a_j||^2, exact for the slack basis
        col_sq = np.asarray(self.Afull.multiply(self.Afull).sum(axis=0)).ravel()
        self.weights = 1.0 + col_sq
        self.weights[self.basic] = 1.0

    def _infeasibility(self) -> tuple[np.ndarray, float]:
        zb = self.z[self.basic]
        below = zb < self.lo[self.basic] - self.tol
        above = zb > self.hi[self.basic] + self.tol
        cb = np.zeros(self.m)
        cb[below] = -1.0
        cb[above] = 1.0
        amount = float(np.sum(self.lo[self.basic][below] - zb[below]) +
                       np.sum(zb[above] - self.hi[self.basic][above]))
        return cb, amount

    def _price(self, d: np.ndarray) -> int:
        st = self.state
        cand = ((st == AT_LOWER) & (d < -self.dtol)) | ((st == AT_UPPER) & (d > self.dtol)) | \
               ((st == FREE_ZERO) & (np.abs(d) > self.dtol))
        idx = np.flatnonzero(cand)
        if len(idx) == 0:
            return -1
        if self.rule is PivotRule.BLAND or self._stalled:
            return int(idx[0])
        score = d[idx] ** 2
        if self.rule is PivotRule.STEEPEST:
            score = score / self.weights[idx]
        return int(idx[np.argmax(score)])

    def _ratio(self, q: int, direction: float, alpha: np.ndarray, phase1: bool):
        """Return (step, leaving row or -1 for a bound flip)."""
        zb = self.z[self.basic]
        lob, hib = self.lo[self.basic], self.hi[self.basic]
        delta = -direction * alpha  # change of basic values per unit step
        step_flip = self.hi[q] - self.lo[q]
        if phase1:
            # infeasible basics may move towards (and stop at) the violated bound
            below = zb < lob - self.tol
            above = zb > hib + self.tol
            lim_lo = np.where(below, -np.inf, lob)
            lim_hi = np.where(above, np.inf, hib)
            lim_hi = np.where(below, lob, lim_hi)
            lim_lo = np.where(above, hib, lim_lo)
        else:
            lim_lo, lim_hi = lob, hib
        big = np.abs(delta) > self.ptol
        dec = big & (delta < 0) & np.isfinite(lim_lo)
        inc = big & (delta > 0) & np.isfinite(lim_hi)
        ratios = np.full(self.m, np.inf)
        slack_lo = np.maximum(zb[dec] - lim_lo[dec], 0.0)
        slack_hi = np.maximum(lim_hi[inc] - zb[inc], 0.0)
        if self.rule is PivotRule.BLAND or self._stalled:
            ratios[dec] = slack_lo / -delta[dec]
            ratios[inc] = slack_hi / delta[inc]
            tmin = ratios.min() if self.m else np.inf
            if step_flip <= tmin:
                return step_flip, -1
            if not np.isfinite(tmin):
                return np.inf, -1
            ties = np.flatnonzero(ratios <= tmin + 1e-12 * max(1.0, tmin))
            r = int(ties[np.argmin(self.basic[ties])])
            return float(ratios[r]), r
        # Harris two-pass ratio test
        relax = np.full(self.m, np.inf)
        relax[dec] = (slack_lo + self.tol) / -delta[dec]
        relax[inc] = (slack_hi + self.tol) / delta[inc]
        tmax = relax.min() if self.m else np.inf
        if step_flip <= tmax:
            return step_flip, -1
        if not np.isfinite(tmax):
            return np.inf, -1
        ratios[dec] = slack_lo / -delta[dec]
        ratios[inc] = slack_hi / delta[inc]
        ok = np.flatnonzero(ratios <= tmax)
        r = int(ok[np.argmax(np.abs(delta[ok]))])
        return float(ratios[r]), r

    def _update_weights(self, q: int, r: int, alpha: np.ndarray) -> None:
        # Goldfarb-Reid recurrence for primal steepest-edge reference weights
        aq = alpha[r]
        rho = self.B.btran(np.eye(1, self.m, r).ravel())
        row = self.AfullT @ rho  # pivot row over all columns
        v = self.B.btran(alpha)
        av = self.AfullT @ v
        wq = max(self.weights[q], 1.0 + float(alpha @ alpha))
        ratio = row / aq
        w = self.weights
        nb = self.state != BASIC
        nb[q] = False
        w_new = w - 2.0 * ratio * av + ratio ** 2 * wq
        w[nb] = np.maximum(w_new[nb], 1.0 + ratio[nb] ** 2)
        leaving = self.basic[r]
        w[leaving] = max(wq / aq ** 2, 1.0)
        w[q] = 1.0

    def _refactor(self, refine: int = 0) -> None:
        """Fresh LU of the basis; a singular basis rolls back to the last good one."""
        try:
            self.B.factor(self.basic)
        except RuntimeError:
            if self._good is None:
                raise
            log.warning("basis became singular; rolling back and tightening the pivot tolerance")
            self.basic, self.state = self._good[0].copy(), self._good[1].copy()
            nb = self.state != BASIC
            self.z[nb] = np.where(self.state[nb] == AT_UPPER, self.hi[nb],
                                  np.where(self.state[nb] == AT_LOWER, self.lo[nb], 0.0))
            self.ptol = min(self.ptol * 100, 1e-5)
            self.B.factor(self.basic)
        self._good = (self.basic.copy(), self.state.copy())
        self._recompute_basic(refine=refine)

    def solve(self) -> SimplexResult:
        t0 = time.perf_counter()
        self._good = (self.basic.copy(), self.state.copy())
        phase1 = True
        self._stalled = False
        last_obj, stall = np.inf, 0
        since_refactor = 0
        while True:
            if self.iterations >= self.max_iter:
                raise MaxIterationsError(f"simplex stopped after {self.iterations} iterations")
            if self.time_limit and time.perf_counter() - t0 > self.time_limit:
                raise MaxIterationsError(f"simplex time limit reached after {self.iterations} iterations")
            if phase1:
                cb, infeas = self._infeasibility()
                if infeas == 0.0:
                    phase1 = False
                    self.phase1_iterations = self.iterations
                    last_obj, stall = np.inf, 0
                    self._stalled = False
                    continue
                cfull = np.zeros(self.n + self.m)
                cfull[self.basic] = cb
                y = self.B.btran(cb)
                d = -(self.AfullT @ y)
                obj = infeas
            else:
                cfull = self.cost
                y = self.B.btran(self.cost[self.basic])
                d = self.cost - self.AfullT @ y
                obj = float(self.cost @ self.z)
            d[self.basic] = 0.0
            if obj < last_obj - 1e-12 * max(1.0, abs(obj)):
                last_obj, stall = obj, 0
                self._stalled = False
            else:
                stall += 1
                if stall > 50 and self.rule is not PivotRule.BLAND:
                    self._stalled = True  # fall back to Bland until progress resumes
            q = self._price(d)
            if q < 0:
                if phase1:
                    # confirm with a fresh factorisation before declaring infeasibility
                    self._refactor(refine=2)
                    _, infeas = self._infeasibility()
                    if infeas == 0.0:
                        continue
                    d_chk = -(self.AfullT @ self.B.btran(self._infeasibility()[0]))
                    d_chk[self.basic] = 0.0
                    if self._price(d_chk) >= 0:
                        continue
                    raise InfeasibleError(f"no feasible point (infeasibility {infeas:.3e})")
                # optimal for the current factorisation; refine and confirm
                self._refactor(refine=2)
                since_refactor = 0
                _, infeas = self._infeasibility()
                if infeas > 0.0:
                    phase1 = True
                    continue
                y = self.B.btran(self.cost[self.basic])
                d = self.cost - self.AfullT @ y
                d[self.basic] = 0.0
                if self._price(d) >= 0:
                    continue
                break
            direction = 1.0 if (self.state[q] == AT_LOWER or
                                (self.state[q] == FREE_ZERO and d[q] < 0)) else -1.0
            alpha = self.B.ftran(self._column(q))
            step, r = self._ratio(q, direction, alpha, phase1)
            if not np.isfinite(step):
                if phase1:
                    raise UnboundedError("unbounded ray during phase one")
                raise UnboundedError("objective is unbounded")
            self.iterations += 1
            self.z[self.basic] -= step * direction * alpha
            self.z[q] += step * direction
            if r < 0:
                self.state[q] = AT_UPPER if direction > 0 else AT_LOWER
                self.z[q] = self.hi[q] if direction > 0 else self.lo[q]
                continue
            if self.rule is PivotRule.STEEPEST:
                self._update_weights(q, r, alpha)
            leaving = self.basic[r]
            zl = self.z[leaving]
            if abs(zl - self.lo[leaving]) <= abs(zl - self.hi[leaving]):
                self.state[leaving], self.z[leaving] = AT_LOWER, self.lo[leaving]
            else:
                self.state[leaving], self.z[leaving] = AT_UPPER, self.hi[leaving]
            if not np.isfinite(self.z[leaving]):
                self._rest(leaving)
            self.basic[r] = q
            self.state[q] = BASIC
            since_refactor += 1
            if since_refactor >= self.refactor:
                self._refactor()
                since_refactor = 0
            else:
                self.B.update(r, alpha)

        cb = self.cost[self.basic]
        y = self.B.btran(cb)
        res = np.inf
        for _ in range(3):  # iterative refinement; long bases lose digits in y
            ry = cb - self.Afull[:, self.basic].T @ y
            nr = float(np.abs(ry).max(initial=0.0))
            if nr >= res or nr == 0.0:
                break
            res = nr
            y = y + self.B.btran(ry)
        d = self.cost - self.AfullT @ y
        d[self.basic] = 0.0
        return SimplexResult(
            x=self.z[:self.n].copy(), slack=self.z[self.n:].copy(), y=y, reduced=d[:self.n].copy(),
            value=float(self.cost @ self.z), iterations=self.iterations, basis=self.basic.copy(),
            rule=self.rule.value, phase1_iterations=self.phase1_iterations,
            seconds=time.perf_counter() - t0)


def senses_to_bounds(senses, m: int) -> tuple[np.ndarray, np.ndarray]:
    if senses is None:
        return np.zeros(m), np.full(m, np.inf)
    slo, shi = np.zeros(m), np.full(m, np.inf)
    for i, s in enumerate(senses):
        if s == "=":
            shi[i] = 0.0
        elif s == ">":
            slo[i], shi[i] = -np.inf, 0.0
        elif s != "<":
            raise ValueError(f"unknown row sense {s!r}")
    return slo, shi


def linprog_max(c, A, b, lo=None, hi=None, senses=None, **kw) -> SimplexResult:
    """Maximise c @ x subject to A @ x (<=|=|>=) b and bounds; row duals are for the max form."""
    A = sp.csc_matrix(A)
    m, n = A.shape
    lo = np.zeros(n) if lo is None else np.asarray(lo, float)
    hi = np.full(n, np.inf) if hi is None else np.asarray(hi, float)
    slo, shi = senses_to_bounds(senses, m)
    res = Simplex(-np.asarray(c, float), A, b, lo, hi, slo, shi, **kw).solve()
    res.value = -res.value
    res.y = -res.y
    res.reduced = -res.reduced
    return res
