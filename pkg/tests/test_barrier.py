from __future__ import annotations

import csv

import numpy as np
import pytest

from conftest import MEASURES, cached_run
from kcave.barrier import (KCaveBarrier, barrier_distance, barrier_law, barrier_mismatch,
                           embedded_measure, extract_barrier, regularize, right_support_gaps,
                           verify_shape, write_barrier_csv)
from kcave.embed_lp import StoppingLaw, assemble, derive_q, solve
from kcave.errors import ShapeError
from kcave.lattice import build_lattice
from kcave.measures import discretize, make_measure, potential


def small(atoms, N=1, k=1.0):
    m = make_measure(atoms, 0.0)
    lat = build_lattice("bm", N, (-1.0, 1.0), 0.0, 1.0, k)
    dm = discretize(m, lat)
    sol = solve(assemble(lat, potential(dm), target=dm.weights))
    return lat, dm, sol


def test_two_atom_n1():
    lat, dm, sol = small([(-1, 0.5), (1, 0.5)])
    b = extract_barrier(sol.law, lat)
    s = lat.row(0)
    # the walk leaves the start at once and never returns before stopping at +-1
    assert b.r_idx[s] == 1 and b.l_idx[s] == -1
    au = embedded_measure(sol.law, lat, dm)
    assert au.weights.tolist() == [0.5, 0.0, 0.5] and au.max_deviation == 0.0
    assert barrier_mismatch(b, sol.law) == 0.0


def test_delta_target():
    lat, dm, sol = small([(0.0, 1.0)], N=4, k=0.5)
    b = extract_barrier(sol.law, lat)
    assert np.array_equal(b.l_idx, lat.K_idx) and np.array_equal(b.r_idx, lat.K_idx)
    assert verify_shape(sol.law, lat).ok
    au = embedded_measure(sol.law, lat, dm)
    s = lat.row(lat.j_star)
    assert au.weights[s] == 1.0 and au.left[s] == 1.0


@pytest.mark.parametrize("name", list(MEASURES))
def test_optimum_properties(name):
    res = cached_run(name, 16)
    lat, b, au = res.lattice, res.barrier, res.audit
    assert res.shape.ok and not res.problems
    assert np.all(b.l_idx <= lat.K_idx) and np.all(lat.K_idx <= b.r_idx)
    assert au.max_deviation <= 50 * res.config.tol
    assert au.completion_defect <= 50 * res.config.tol
    assert np.allclose(au.weights, au.left + au.right, atol=1e-15)
    assert au.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert barrier_mismatch(b, res.law) <= 1e-9
    assert len(right_support_gaps(au)) == 0
    assert np.all(b.r_idx[au.supp_l()] <= lat.T_star)


@pytest.mark.parametrize("name", list(MEASURES))
def test_stop_regions_are_barriers(name):
    res = cached_run(name, 16)
    b = res.regular
    s = b.stop_matrix()
    t = np.arange(s.shape[1])
    for i in range(1, b.lattice.L):
        left = t <= b.l_idx[i]
        right = t >= b.r_idx[i]
        assert np.all(s[i, left] == 1) and np.all(s[i, right[:-1].nonzero()[0]] == 1)
        # inverse barrier closed downward, barrier closed upward
        assert np.all(np.diff(left.astype(int)) <= 0) and np.all(np.diff(right.astype(int)) >= 0)


@pytest.mark.parametrize("name", list(MEASURES))
@pytest.mark.parametrize("N", [16, 64])
def test_regular_barrier_properties(name, N):
    res = cached_run(name, N)
    reg, au = res.regular, res.audit
    assert regularize(reg, au).l_idx.tolist() == reg.l_idx.tolist()  # idempotent
    supp = au.supp()
    lat = reg.lattice
    inner = [i for i in range(1, lat.L) if supp[0] <= i <= supp[-1]]  # edge rows absorb
    assert all(a <= b for a, b in zip(reg.l_idx[inner], reg.l_idx[inner][1:]))
    assert np.max(np.abs(barrier_law(reg).q - barrier_law(res.barrier).q)) <= 1e-12


def test_regularize_removes_an_inert_dip():
    res = cached_run("three-atom", 16)
    raw, reg = res.barrier, res.regular
    l = raw.l_idx[1:-1]
    assert np.any(np.diff(l) < 0)  # the solver leaves l = 0 on levels never reached at t = 0
    assert np.all(np.diff(reg.l_idx[1:-1]) >= 0)
    assert np.max(np.abs(barrier_law(reg).q - res.law.q)) <= 1e-9


def test_shape_fault_injection():
    res = cached_run("three-atom", 16)
    law, lat = res.law, res.lattice
    run = law.p > 1e-10
    i = next(i for i in range(1, lat.L) if run[i].sum() >= 6)
    cols = np.flatnonzero(run[i])
    mid = cols[len(cols) // 2]
    p = law.p.copy()
    p[i, mid] = 0.0
    with pytest.raises(ShapeError):
        extract_barrier(StoppingLaw(lat, p, law.q, law.handoff), lat)
    # stop mass at a running left node late: flagged as a left violation
    q = law.q.copy()
    t_left = [t for t in cols if t < lat.K_idx[i] and t > cols[0]]
    if t_left:
        q[i, t_left[0]] += 0.01
        rep = verify_shape(StoppingLaw(lat, law.p, q, law.handoff), lat)
        assert not rep.ok and rep.left
    q = law.q.copy()
    t_right = [t for t in cols if t > lat.K_idx[i] and t < cols[-1]]
    assert t_right
    q[i, t_right[0]] += 0.01
    rep = verify_shape(StoppingLaw(lat, law.p, q, law.handoff), lat)
    assert not rep.ok and rep.right


def test_barrier_csv(tmp_path):
    res = cached_run("two-atom", 16)
    path = tmp_path / "b.csv"
    write_barrier_csv(res.barrier, path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["level", "x", "l_time", "K_time", "r_time", "frac_stop_left",
                             "frac_stop_right"]
    assert len(rows) == res.lattice.L + 1


def test_barrier_distance_counts_steps():
    res = cached_run("two-atom", 16)
    b = res.regular
    moved = KCaveBarrier(b.lattice, b.l_idx.copy(), b.r_idx + 2, b.frac_left, b.frac_right,
                         handoff=b.handoff)
    supp = res.audit.supp()
    assert barrier_distance(b, b, supp) == 0
    assert barrier_distance(b, moved, supp) in (1, 2)  # handoff columns are capped
