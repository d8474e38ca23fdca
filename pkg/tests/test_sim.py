import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from notrade.model import scenario
from notrade.policy import Position, value
from notrade.sim import (
    SimConfig, _draw, _keys, _project, _run_block, compare_to_solution, simulate,
    simulate_scales, step,
)

from conftest import cached_field

SLOW = os.environ.get("NOTRADE_SLOW") == "1"


def mid_start(f, w=1.0):
    z = 0.5 * (f.eta1 + f.eta2)
    return Position(w * (1 - z), w * z)


@pytest.fixture(scope="module")
def reduced():
    """Scenario 1 at dt = 1e-2 and dt = 5e-3 on the same Brownian paths."""
    f = cached_field(1, 0.3, 0.8)
    st0 = mid_start(f)
    coarse = simulate_scales(f, f.params, SimConfig(dt=1e-2, n_paths=4000, start=st0),
                             [1.0], stride=2)[0]
    fine = simulate(f, f.params, SimConfig(dt=5e-3, n_paths=4000, start=st0))
    return f, st0, coarse, fine


class TestStep:
    def test_zero_dynamics_leave_state_unchanged(self):
        P = scenario(1).with_(sigma1=0.0, sigma2=0.0, alpha1=0.0, alpha2=0.0, r=0.0)
        pos = Position(0.4, 0.6)
        new, dl, dm = step(pos, 0.5, 0.0, P, 0.3, -0.2, 1e-2, 0.1, 0.9)
        assert new == pos and dl == dm == 0.0

    def test_sell_projection_conserves(self, field1):
        P = field1.params
        eta1 = field1.eta1
        pos = Position(1 - eta1, eta1)
        new, dl, dm = step(pos, 0.5, 0.05, P, 0.0, 0.2, 1e-2, field1.eta2, eta1)
        # the raw Euler update before projection
        x = pos.x + ((P.r + P.a1 * 0.5) * pos.x - 0.05) * 1e-2
        y = pos.y + (P.r + P.alpha2) * pos.y * 1e-2 + P.sigma2 * pos.y * 0.2
        assert y / (x + y) > eta1
        assert new.z == pytest.approx(eta1, abs=1e-14)
        assert new.x + (1 - P.mu) * new.y == pytest.approx(x + (1 - P.mu) * y, rel=1e-12)
        assert dl == 0.0 and dm == pytest.approx(y - new.y, rel=1e-12)

    def test_small_shock_is_plain_euler(self, field1):
        P = field1.params
        pos = mid_start(field1)
        pi, c, dw1, dw2, dt = 0.4, 0.06, 1e-3, -2e-3, 1e-3
        new, dl, dm = step(pos, pi, c, P, dw1, dw2, dt, field1.eta2, field1.eta1)
        assert dl == dm == 0.0
        assert new.x == pos.x + ((P.r + P.alpha1 * pi) * pos.x - c) * dt + P.sigma1 * pi * pos.x * dw1
        assert new.y - pos.y == pytest.approx((P.r + P.alpha2) * pos.y * dt + P.sigma2 * pos.y * dw2,
                                              rel=1e-12)


@given(x=st.floats(0.01, 5.0), y=st.floats(-0.5, 5.0))
def test_projection_conserves_and_buys_or_sells(x, y):
    lam, mu, eta2, eta1 = 0.2, 0.3, 0.25, 0.7
    if x + y <= 0:
        return
    xn, yn, dl, dm = _project(x, y, eta2, eta1, lam, mu)
    assert dl >= 0 and dm >= 0 and dl * dm == 0
    z = y / (x + y)
    if z > eta1:
        assert xn + (1 - mu) * yn == pytest.approx(x + (1 - mu) * y, rel=1e-12)
        assert yn / (xn + yn) == pytest.approx(eta1, abs=1e-12)
    elif z < eta2:
        assert xn + yn / (1 - lam) == pytest.approx(x + y / (1 - lam), rel=1e-12)
        assert yn / (xn + yn) == pytest.approx(eta2, abs=1e-12)
    else:
        assert (xn, yn) == (x, y)


def test_degenerate_market_matches_closed_form():
    # no returns, theta = 1, consumption c = d W from an all-liquid start
    beta, p, d, T = 0.1, 0.3, 0.05, 40.0
    tab = np.array([[0.0, d, d**p], [0.0, d, d**p]])
    sc2 = np.ones((2, 1))
    exact = d**p / p * (1 - math.exp(-(beta + p * d) * T)) / (beta + p * d)
    errs = []
    for dt in (1e-2, 5e-3):
        cf = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.1, -1e9, 1e9, 0.0, 1.0, p, dt)
        acc = _run_block(7, 0, 2, 1, sc2, Position(1.0, 0.0), cf, tab,
                         int(round(T / dt)), beta, dt, True)[0]
        assert acc[0, 0] == acc[0, 1]
        errs.append(abs(acc[0, 0] - exact))
    assert errs[0] < 1e-2 * exact
    # first order in dt
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)


class TestScenarioOne:
    def test_estimate_consistent_with_value(self, reduced):
        f, st0, _, fine = reduced
        rep = compare_to_solution(fine, f, st0)
        assert rep.verdict == "consistent", rep
        assert rep.value == pytest.approx(value(st0, f))
        assert fine.complete and fine.bankrupt_paths == 0

    def test_never_trade_never_consume_is_worse(self, field1):
        st0 = mid_start(field1)
        res = simulate(field1, field1.params, SimConfig(dt=1e-2, T=50, n_paths=200, start=st0,
                                                        policy="static"))
        assert value(st0, field1) - res.estimate > 3 * res.std_error
        assert res.L_total == res.M_total == 0.0

    def test_dt_halving_within_one_std_error(self, reduced):
        _, _, coarse, fine = reduced
        assert abs(coarse.estimate - fine.estimate) < fine.std_error

    @pytest.mark.slow
    @pytest.mark.skipif(not SLOW, reason="full-size run, set NOTRADE_SLOW=1")
    def test_dt_halving_full_size(self, field1):
        st0 = mid_start(field1)
        a = simulate_scales(field1, field1.params,
                            SimConfig(dt=1e-3, n_paths=100_000, start=st0), [1.0], stride=2)[0]
        b = simulate(field1, field1.params, SimConfig(dt=5e-4, n_paths=100_000, start=st0))
        assert abs(a.estimate - b.estimate) < b.std_error

    def test_paths_stay_in_widened_wedge(self, reduced):
        f, _, coarse, fine = reduced
        for res in (coarse, fine):
            lo, hi = res.z_range
            assert f.eta2 - f.h <= lo and hi <= f.eta1 + f.h

    def test_trade_totals_nonnegative(self, reduced):
        _, _, coarse, fine = reduced
        assert fine.L_total > 0 and fine.M_total > 0
        assert coarse.L_total >= 0 and coarse.M_total >= 0


class TestDeterminism:
    cfg = SimConfig(dt=1e-2, T=5.0, n_paths=512, master_seed=99)

    def test_same_seed_same_result(self, field1):
        cfg = SimConfig(**{**self.cfg.__dict__, "start": mid_start(field1)})
        a = simulate(field1, field1.params, cfg)
        b = simulate(field1, field1.params, cfg)
        assert a.to_dict() == b.to_dict()
        assert compare_to_solution(a, field1, cfg.start) == compare_to_solution(b, field1, cfg.start)

    def test_block_size_does_not_matter(self, field1):
        cfg = SimConfig(**{**self.cfg.__dict__, "start": mid_start(field1)})
        a = simulate_scales(field1, field1.params, cfg, [1.0, 2.0], block=16)
        b = simulate_scales(field1, field1.params, cfg, [1.0, 2.0], block=4096)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.samples, rb.samples)
            assert ra.estimate == rb.estimate

    def test_scales_share_paths_with_single_runs(self, field1):
        cfg = SimConfig(**{**self.cfg.__dict__, "start": mid_start(field1)})
        both = simulate_scales(field1, field1.params, cfg, [1.0, 2.0])
        single = simulate(field1, field1.params,
                          SimConfig(**{**cfg.__dict__, "consumption_scale": 2.0}))
        assert both[1].estimate == single.estimate

    def test_doubling_paths_shrinks_error(self, field1):
        st0 = mid_start(field1)
        se = [simulate(field1, field1.params,
                       SimConfig(dt=1e-2, T=20.0, n_paths=n, start=st0, master_seed=3)).std_error
              for n in (2000, 4000)]
        assert se[0] / se[1] == pytest.approx(math.sqrt(2), rel=0.2)


class TestDegenerateStatistics:
    def test_single_path_has_no_error_bar(self, field1):
        st0 = mid_start(field1)
        res = simulate(field1, field1.params, SimConfig(dt=1e-2, T=2.0, n_paths=1, start=st0))
        assert np.isnan(res.std_error) and res.to_dict()["std_error"] is None
        assert compare_to_solution(res, field1, st0).verdict == "undetermined"

    def test_static_policy_negative_p_is_invalid(self, field1_neg):
        st0 = mid_start(field1_neg)
        res = simulate(field1_neg, field1_neg.params,
                       SimConfig(dt=1e-2, T=2.0, n_paths=4, start=st0, policy="static"))
        assert res.estimate == -np.inf
        assert compare_to_solution(res, field1_neg, st0).verdict == "invalid"

    def test_negative_p_optimal_is_finite(self, field1_neg):
        st0 = mid_start(field1_neg)
        res = simulate(field1_neg, field1_neg.params,
                       SimConfig(dt=1e-2, T=10.0, n_paths=64, start=st0))
        assert np.isfinite(res.estimate) and res.estimate < 0 and res.std_error >= 0


def test_start_outside_wedge_is_moved_first(field1):
    # an all-liquid start buys onto the eta2 ray at time zero
    a = simulate(field1, field1.params, SimConfig(dt=1e-2, T=5.0, n_paths=64, start=Position(1.0, 0.0)))
    P = field1.params
    w = 1.0 / (1 + field1.eta2 * P.lam / (1 - P.lam))
    b = simulate(field1, field1.params, SimConfig(dt=1e-2, T=5.0, n_paths=64,
                                                  start=Position(w * (1 - field1.eta2), w * field1.eta2)))
    assert a.estimate == pytest.approx(b.estimate, rel=1e-12)


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(T=1e-4, dt=1e-3), dict(n_paths=0),
                                dict(projection_mode="exact"), dict(policy="greedy"),
                                dict(consumption_scale=0.0), dict(master_seed=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_stride_must_be_positive(field1):
    with pytest.raises(ValueError):
        simulate_scales(field1, field1.params, SimConfig(dt=1e-2, T=1.0, n_paths=2), [1.0], stride=0)


def test_normal_draws_have_unit_moments():
    n = 200_000
    keys = _keys(np.uint64(11), np.uint64(0), n)
    v1, v2, s = np.empty(n), np.empty(n), np.empty(n)
    _draw(keys, 3, v1, v2, s)
    fac = np.sqrt(-2 * np.log(s) / s)
    e1, e2 = v1 * fac, v2 * fac
    for e in (e1, e2):
        assert abs(e.mean()) < 5 / math.sqrt(n)
        assert abs(e.var() - 1) < 0.02
        assert abs(np.mean(e**4) - 3) < 0.1
    assert abs(np.corrcoef(e1, e2)[0, 1]) < 5 / math.sqrt(n)
    v1b = np.empty(n)
    _draw(keys, 4, v1b, v2, s)
    assert abs(np.corrcoef(v1, v1b)[0, 1]) < 5 / math.sqrt(n)
