from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kcave.errors import HorizonError
from kcave.lattice import (HorizonPolicy, build_lattice, k_curve, martingale_kernel, payoff,
                           payoff_horizon)


def test_arithmetic_levels():
    lat = build_lattice("bm", 4, (-1, 1), 0.0, 1.0, 1.0)
    assert lat.x.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert lat.x_start == 0.0 and lat.up_prob == 0.5
    assert lat.T_max == lat.T_star + 2


def test_geometric_up_probability():
    lat = build_lattice("letf", 4, (math.exp(-1), math.e), 1.0, 2.0, 1.0)
    assert lat.x == pytest.approx(np.exp(np.arange(-2, 3) / 2))
    expected = (1 - math.exp(-0.5)) / (math.exp(0.5) - math.exp(-0.5))
    assert lat.up_prob == pytest.approx(expected, abs=1e-15)
    x = lat.x
    assert lat.up_prob * x[2:] + lat.down_prob * x[:-2] == pytest.approx(x[1:-1], abs=1e-12)


def test_zero_strike_needs_horizon():
    with pytest.raises(HorizonError):
        build_lattice("bm", 4, (-1, 1), 0.0, 1.0, 0.0)
    lat = build_lattice("bm", 4, (-1, 1), 0.0, 1.0, 0.0, HorizonPolicy(override=6))
    assert lat.T_max == 6 and not lat.strike_vanishes
    with pytest.raises(HorizonError):
        payoff_horizon(lat)


def test_geometric_beta_one_never_vanishes():
    with pytest.raises(HorizonError):
        build_lattice("letf", 4, (0.5, 2.0), 1.0, 1.0, 1.0)


def test_payoff_values():
    lat = build_lattice("bm", 1, (-1, 1), 0.0, 1.0, 1.0)
    assert payoff(lat, 1, 0) == pytest.approx(math.e - 1, abs=1e-12)
    assert all(payoff(lat, 0, t) == 0.0 for t in range(lat.T_max + 1))
    assert lat.F[lat.row(1), 0] == pytest.approx(math.e - 1, abs=1e-12)


def test_one_step_identity_n1():
    lat = build_lattice("bm", 1, (-1, 1), 0.0, 1.0, 1.0)
    c = math.cosh(1.0)
    for t in range(4):
        lhs = 0.5 * martingale_kernel(lat, 1, t + 1) + 0.5 * martingale_kernel(lat, -1, t + 1)
        assert lhs == pytest.approx(c ** -t, rel=1e-12)


def test_payoff_horizon_n1():
    lat = build_lattice("bm", 1, (-1, 1), 0.0, 1.0, 1.0)
    assert payoff_horizon(lat) == math.ceil(1 / math.log(math.cosh(1))) == 3
    assert np.all(lat.F[:, 3:] == 0) and lat.F[:, 2].max() > 0


def test_strike_above_payoff():
    lat = build_lattice("bm", 4, (-1, 1), 0.0, 1.0, math.e + 0.1)
    assert payoff_horizon(lat) == 0 and np.all(lat.F == 0)
    assert np.all(k_curve(lat) == 0)


@given(st.sampled_from(["bm", "letf"]), st.sampled_from([1, 4, 9, 16, 25]),
       st.floats(1.2, 3.0), st.floats(0.3, 2.0))
def test_kernel_martingale_and_payoff_grid(model, N, beta, k):
    support = (-1.0, 1.0) if model == "bm" else (0.5, 2.0)
    start = 0.0 if model == "bm" else 1.0
    lat = build_lattice(model, N, support, start, beta, k)
    h, F = lat.h, lat.F
    avg = lat.up_prob * h[2:, 1:] + lat.down_prob * h[:-2, 1:]
    assert avg == pytest.approx(h[1:-1, :-1], rel=1e-12)
    assert np.all(np.diff(F, axis=1) <= 0)
    assert np.all(F[:, lat.T_star:] == 0)
    assert F == pytest.approx(np.where(np.arange(F.shape[1]) < lat.T_star,
                                       np.maximum(h - k, 0), 0.0), abs=1e-12)
    K = k_curve(lat)
    t = np.arange(F.shape[1])
    for i in range(lat.L + 1):
        # weak inequality: first column with h <= k
        assert h[i, K[i]] <= k or K[i] == lat.T_max
        assert K[i] == 0 or h[i, K[i] - 1] > k
        assert np.all(F[i, t >= K[i]] == 0)
    if model == "bm":
        assert np.all(np.diff(K) >= 0)


def test_k_curve_matches_continuous_curve():
    # beta = 2, k = 1: continuous K(x) = x
    errs = []
    for N in (16, 64, 256, 1024):
        lat = build_lattice("bm", N, (0.0, 1.0), 0.5, 2.0, 1.0)
        i = lat.row(int(math.sqrt(N)))  # level x = 1
        errs.append(abs(lat.K_idx[i] / N - 1.0))
    assert errs[-1] < 2e-3 and errs[-1] < errs[0]


def test_time_difference_converges_first_order():
    # x = 1, t = 1/4 lie on every grid; the limit is -(beta^2/2) h
    beta, x, t = 1.0, 1.0, 0.25
    exact = -0.5 * beta ** 2 * math.exp(beta * x - 0.5 * beta ** 2 * t)
    errs = []
    for N in (16, 64, 256, 1024):
        lat = build_lattice("bm", N, (-1.0, 1.0), 0.0, beta, 1.0)
        i, m = lat.row(int(math.sqrt(N) * x)), int(N * t)
        errs.append(abs(N * (lat.F[i, m] - lat.F[i, m - 1]) - exact))
    rates = [math.log2(errs[a] / errs[a + 1]) / 2 for a in range(3)]
    assert all(0.8 < r < 1.2 for r in rates), rates


def test_start_shift_and_summary():
    lat = build_lattice("bm", 4, (-1, 1), 0.1, 1.0, 1.0)
    assert lat.x_start == 0.0
    s = lat.summary()
    assert set(s) >= {"model", "N", "levels", "T_star", "T_max", "up_prob"}
