from __future__ import annotations

import csv

import numpy as np
import pytest

from conftest import MEASURES, cached_run
from kcave.barrier import barrier_law, embedded_measure
from kcave.hedge import (build_hedge, compute_Gstar, compute_M, dual_to_hedge, extend_eta,
                         gamma_agreement, hedge_json, kernel_drift, law_value, solve_static,
                         time_zero_split, tol_gamma, verify_dual_hedge, verify_gamma_condition,
                         verify_superhedge, write_gamma_csv)
from kcave.pipeline import hedge_run


@pytest.fixture(params=[(m, N) for m in MEASURES for N in (16, 64)], ids=lambda p: f"{p[0]}-{p[1]}")
def case(request):
    return cached_run(*request.param)


def test_tolerance_scale():
    assert tol_gamma(16) == 0.125 and tol_gamma(64, 1.0) == 0.125


def test_M_bands(case):
    lat, b = case.lattice, case.regular
    M = compute_M(lat, b)
    h = lat.h
    dh = np.zeros_like(h)
    dh[:, :-1] = h[:, 1:] - h[:, :-1]
    dh[:, -1] = h[:, -1] * (1 / lat.growth - 1)
    t = np.arange(M.shape[1])[None, :]
    assert np.all(M <= 1e-15)
    assert np.all(M >= dh - 1e-12)  # E[h(tau+1) - h(tau)] = (1/g - 1) h by optional stopping
    assert np.all(M[t >= b.r_idx[:, None]] == 0)
    F = lat.F
    left = (t <= b.l_idx[:, None]) & (t < lat.T_max)
    left[[0, -1], :] = False
    dF = F[:, 1:] - F[:, :-1]
    assert np.allclose(M[:, :-1][left[:, :-1]], dF[left[:, :-1]], atol=0)
    # where the payoff is still positive one step later, M is the kernel decrement
    pos = left[:, :-1] & (h[:, 1:] > lat.k) & (t[:, :-1] < lat.T_star - 1)
    assert np.allclose(M[:, :-1][pos], dh[:, :-1][pos], rtol=1e-12)


def test_M_zero_before_certain_absorption():
    res = cached_run("two-atom", 16)
    lat, b = res.lattice, res.regular
    M = compute_M(lat, b)
    s = b.stop_matrix()
    found = 0
    for i in range(1, lat.L):
        for t in range(lat.T_max):
            if s[i, t] == 0 and t + 1 >= b.r_idx[i - 1] and t + 1 >= b.r_idx[i + 1]:
                assert M[i, t] == 0
                found += 1
    assert found


def test_Gstar_telescopes(case):
    lat, b = case.lattice, case.regular
    M = compute_M(lat, b)
    G = compute_Gstar(M, b)
    assert np.all(G >= 0)
    assert np.all(np.diff(G, axis=1) <= 1e-15)
    for i in range(lat.L + 1):
        r = min(int(b.r_idx[i]), lat.T_max + 1)
        if r <= lat.T_max:
            assert G[i, r] == 0
        Gext = np.append(G[i], 0.0)
        for t in range(r):
            assert Gext[t] - Gext[t + 1] == pytest.approx(-M[i, t], abs=1e-15)


def test_superhedge_domination_and_boundary(case):
    lat, b, au = case.lattice, case.regular, case.audit
    hp = build_hedge(lat, b)
    rep = verify_superhedge(hp, lat, b, au)
    assert rep.dominates, rep.to_json()
    assert rep.boundary_ok, rep.to_json()
    t = np.arange(lat.T_max + 1)[None, :]
    past = (t >= b.r_idx[:, None]) & (hp.Gamma[:, None] <= 0)
    assert np.all(hp.S[past] == 0) and np.all(lat.F[past] == 0)


def test_backward_difference_loses_domination():
    # the backward increment lags the forward one by a column; on the five-atom target
    # the resulting S dips below the payoff
    res = cached_run("uniform-5", 16)
    hp = build_hedge(res.lattice, res.regular, "backward")
    rep = verify_superhedge(hp, res.lattice, res.regular, res.audit)
    assert rep.domination > 1e-3


def test_running_region_is_a_martingale_after_static_leg():
    for name in ("two-atom", "three-atom"):
        res = cached_run(name, 16)
        rep = verify_superhedge(build_hedge(res.lattice, res.regular), res.lattice,
                                res.regular, res.audit)
        assert rep.martingale <= 1e-10


def test_gamma_on_meeting_levels():
    res = cached_run("three-atom", 16)
    lat, b = res.lattice, res.regular
    hp = build_hedge(lat, b)
    meet = np.flatnonzero((b.l_idx == b.r_idx) & (b.l_idx == lat.K_idx))
    assert len(meet)
    assert np.all(hp.Gamma[meet] == 0)


def test_gamma_condition_at_optimum(case):
    hp = build_hedge(case.lattice, case.regular)
    rep = verify_gamma_condition(hp.Gamma, case.audit, case.tol_gamma)
    assert rep.ok and rep.gamma_condition, rep.to_json()


def test_delta_gamma_vacuous():
    from kcave.pipeline import RunConfig, solve_run

    res = solve_run(RunConfig(atoms=[(0.0, 1.0)], grid_n=4, strike=0.5, support=(-1, 1)))
    hp = build_hedge(res.lattice, res.barrier)
    assert verify_gamma_condition(hp.Gamma, res.audit, res.tol_gamma).ok


def test_lattice_certificate(case):
    lat = case.lattice
    dh = dual_to_hedge(case.cert, lat, case.regular, case.target)
    rep = verify_dual_hedge(dh, case.law)
    assert rep.ok, rep.to_json()
    assert dh.value == pytest.approx(case.dual_value, abs=50 * case.config.tol)
    # FCS2: eta~ = F where mass stops
    stops = dh.mask & (case.law.q > 1e-10)
    assert np.allclose(dh.eta_tilde[stops], lat.F[stops], atol=1e-9)


def test_dual_gamma_nonpositive_on_right_support(case):
    dh = dual_to_hedge(case.cert, case.lattice, case.regular, case.target)
    sr = case.audit.supp_r()
    assert np.all(dh.gamma_dual[sr] <= case.tol_gamma)


def test_extend_eta_keeps_dual_feasibility():
    res = cached_run("three-atom", 16)
    lat = res.lattice
    et = extend_eta(res.cert, lat) + lat.F
    par = ((lat.levels[:, None] - lat.j_star + np.arange(lat.T_max + 1)[None, :]) % 2) == 0
    d = kernel_drift(lat, et) - res.cert.nu[:, None]
    d[[0, -1], :] = 0
    d[:, -1] = 0
    assert np.all(d[par] <= 1e-9)
    assert np.all(et[par] >= lat.F[par] - 1e-12)


def test_solve_static_inverts_the_drift():
    res = cached_run("uniform-5", 16)
    lat = res.lattice
    rng = np.random.default_rng(3)
    a = np.zeros(lat.L + 1)
    a[1:-1] = rng.normal(size=lat.L - 1)
    H = solve_static(lat, a)
    s = lat.row(lat.j_star)
    assert H[s] == 0 and H[s - 1] == 0
    d = lat.up_prob * H[2:] + lat.down_prob * H[:-2] - H[1:-1]
    assert d == pytest.approx(a[1:-1], abs=1e-9)


@pytest.mark.parametrize("name", list(MEASURES))
def test_gamma_agreement_with_dual(name):
    res = cached_run(name, 64)
    hr = hedge_run(res)
    assert hr.agreement <= res.tol_gamma
    assert hr.agreement == gamma_agreement(hr.portfolio.Gamma, hr.dual.gamma_dual, res.audit)


def test_time_zero_split_embeds_the_target():
    res = cached_run("three-atom", 16)
    b = time_zero_split(res.lattice, res.target)
    law = barrier_law(b)
    au = embedded_measure(law, res.lattice, res.target)
    assert au.max_deviation <= 1e-9 and au.completion_defect <= 1e-9
    assert law_value(law, res.lattice) < res.value
    with pytest.raises(ValueError):
        time_zero_split(res.lattice, cached_run("uniform-5", 16).target)


def test_exports(tmp_path):
    res = cached_run("two-atom", 16)
    hr = hedge_run(res)
    d = hedge_json(hr.portfolio, hr.to_json())
    assert {"M", "Gstar", "Gamma", "superhedge_value", "reports"} <= set(d)
    write_gamma_csv(res.lattice, hr.portfolio.Gamma, hr.dual.gamma_dual, tmp_path / "g.csv")
    rows = list(csv.DictReader(open(tmp_path / "g.csv")))
    assert list(rows[0]) == ["level", "x", "gamma", "gamma_dual"] and len(rows) == res.lattice.L + 1
