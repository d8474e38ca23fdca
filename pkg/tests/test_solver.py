from types import SimpleNamespace

import numpy as np
import pytest

from notrade import hjbgrid as hg
from notrade.model import c_star_const, frictionless_weights, scenario
from notrade.solver import (
    BR, NT, SR, Branches, ConvergenceError, NonConcaveError, Solution, SolveOptions,
    _check_concavity, boundaries_from_labels, extract_boundaries, initial_guess,
    label_regions, solve, verify_complementarity, wedge_constants,
)

from conftest import cached_solve


@pytest.fixture(scope="module", params=[0.3, -0.3], ids=["p+", "p-"])
def sol(request):
    return cached_solve(1, request.param, 0.8)


class TestSolutionInvariants:
    def test_converged_with_finite_ordered_boundaries(self, sol):
        assert np.isfinite(sol.eta2) and np.isfinite(sol.eta1)
        assert sol.params.z_min < sol.eta2 < sol.eta1 < 1
        assert sol.final_residual <= sol.tol

    def test_concave(self, sol):
        sec = np.diff(sol.u, 2)
        assert np.all(sec <= sol.tol * sol.scale)

    def test_labels_monotone_and_nonempty(self, sol):
        reg = sol.region
        assert sol.flags["monotone"]
        assert np.all(np.diff(reg) >= 0)
        assert all(v >= 1 for v in sol.counts().values())

    def test_sign_matches_p(self, sol):
        assert np.all(np.sign(sol.u) == np.sign(sol.params.p))

    def test_liquidate_now_lower_bound(self, sol):
        lb = initial_guess(sol.params, sol.z)
        assert np.all(sol.u - lb >= -sol.tol * sol.scale)
        # spot check the closed form of the bound at z = 0.5 and z = -1
        P = sol.params
        cs = c_star_const(P)
        k = np.argmin(np.abs(sol.z - 0.5))
        z = sol.z[k]
        assert lb[k] == pytest.approx(cs / P.p * ((1 - z) + (1 - P.mu) * z) ** P.p, rel=1e-14)
        k = np.argmin(np.abs(sol.z + 1.0))
        z = sol.z[k]
        assert lb[k] == pytest.approx(cs / P.p * ((1 - z) + z / (1 - P.lam)) ** P.p, rel=1e-14)

    def test_sell_boundary_below_one_for_theta_below_one(self, sol):
        assert sol.eta1 < 1 - sol.grid.h / 2
        assert not sol.flags.get("no_SR", False)

    def test_pi_cap_is_slack(self, sol):
        assert sol.pi_cap_slack < SolveOptions().pi_cap

    def test_every_iteration_matrix_is_m_matrix(self, sol):
        assert sol.history and all(h["m_matrix"] is True for h in sol.history)

    def test_one_active_branch_per_node(self, sol):
        rep = verify_complementarity(sol)
        assert rep.ok, rep.worst
        assert rep.multi_active == 0


def test_scenario_one_example_positive_p(sol1):
    assert sol1.eta2 < sol1.eta1
    assert sol1.iters >= 1


def test_negative_p_values_decrease_toward_left_end(sol1_neg):
    u = sol1_neg.u
    assert np.all(u < 0)
    assert np.all(np.diff(u[:5]) > 0)


def test_refining_left_end_lowers_value_for_negative_p():
    P = scenario(1, p=-0.3, theta=0.8)
    vals = []
    for delta in (0.4, 0.04, 0.004):
        lo = P.z_min + delta
        g = hg.Grid(lo, 0.995, 4001)
        vals.append(solve(P, g).u[0])
    assert vals[0] > vals[1] > vals[2]


def test_frictionless_limit_brackets_merton_weight():
    P = scenario(1, p=0.3, theta=1.0, lam=1e-4, mu=1e-4)
    s = solve(P, hg.Grid.default(P, n=8001))
    w2 = frictionless_weights(P)[1]
    assert abs(0.5 * (s.eta1 + s.eta2) - w2) <= 0.02
    assert s.eta1 - s.eta2 <= 0.05


def test_cost_sweep_shrinks_no_trade_width():
    widths = []
    for c in (0.1, 0.05, 0.01, 1e-3):
        s = solve(scenario(1, p=0.3, theta=1.0, lam=c, mu=c))
        widths.append(s.eta1 - s.eta2)
    assert all(a > b for a, b in zip(widths, widths[1:]))


def test_grid_refinement_stability():
    P = scenario(1, p=0.3, theta=0.8)
    g = hg.Grid.default(P, n=2001)
    fine = hg.Grid(g.z_lo, g.z_hi, 2 * g.n - 1)
    a, b = solve(P, g), solve(P, fine)
    assert abs(a.eta2 - b.eta2) <= 2 * g.h
    assert abs(a.eta1 - b.eta1) <= 2 * g.h


def test_extrapolated_ends_agree_with_pinned(sol1):
    s = solve(sol1.params, sol1.grid, SolveOptions(boundary_mode="extrapolated"))
    assert abs(s.eta2 - sol1.eta2) <= sol1.grid.h
    assert abs(s.eta1 - sol1.eta1) <= sol1.grid.h
    assert s.history[0]["m_matrix"] is None


def test_damped_iteration_reaches_same_solution(sol1):
    s = solve(sol1.params, sol1.grid, SolveOptions(damping=0.5, max_iters=400))
    assert np.max(np.abs(s.u - sol1.u)) <= 1e-6 * sol1.scale
    assert (s.eta2, s.eta1) == (sol1.eta2, sol1.eta1)


def test_scenario_two_solves_with_pi_pinned():
    s = cached_solve(2, 0.3, 0.8)
    assert np.all(s.branches.pi == 0.0)
    assert s.eta2 < s.eta1


class TestBoundaries:
    def test_midpoint_example(self):
        z = np.linspace(0.0, 1.0, 6)
        labels = np.array([BR, BR, NT, NT, NT, SR])
        eta2, eta1, flags = boundaries_from_labels(labels, z)
        assert eta2 == pytest.approx(0.3) and eta1 == pytest.approx(0.9)
        assert flags["monotone"]
        stub = SimpleNamespace(region=labels, z=z, flags={}, boundary_mode="extrapolated")
        assert extract_boundaries(stub) == (pytest.approx(0.3), pytest.approx(0.9))

    def test_pinned_end_alone_is_not_a_region(self):
        z = np.linspace(0.0, 1.0, 6)
        stub = SimpleNamespace(region=np.array([BR, BR, NT, NT, NT, SR]), z=z, flags={},
                               boundary_mode="obstacle-pinned")
        eta2, eta1 = extract_boundaries(stub)
        assert eta1 == 1.0 and stub.flags["no_SR"]
        assert eta2 == pytest.approx(0.3)

    def test_missing_regions_flagged(self):
        z = np.linspace(0.0, 1.0, 5)
        eta2, eta1, flags = boundaries_from_labels(np.array([NT] * 5), z)
        assert flags["no_BR"] and flags["no_SR"]
        assert (eta2, eta1) == (0.0, 1.0)
        _, _, flags = boundaries_from_labels(np.array([BR] * 5), z)
        assert flags["no_NT"]

    def test_nonmonotone_labels_flagged(self):
        z = np.linspace(0.0, 1.0, 6)
        _, _, flags = boundaries_from_labels(np.array([BR, NT, BR, NT, SR, SR]), z)
        assert not flags["monotone"]

    def test_theta_one_sell_region_can_vanish(self):
        s = cached_solve(3, 0.3, 1.0)
        assert s.flags.get("no_SR")
        assert s.eta1 == s.z[-1]
        assert s.counts()["SR"] == 0

    def test_extract_matches_solution(self, sol1):
        assert extract_boundaries(sol1) == (sol1.eta2, sol1.eta1)
        assert abs(sol1.resolution - sol1.grid.h / 2) < 1e-15


def test_tie_break_prefers_no_trade():
    zeros = np.zeros(3)
    br = Branches(F=np.array([0.0, 1.0, 1.0]), S=np.array([0.0, 0.0, 1.0]),
                  B=np.array([0.0, 0.0, 0.0]), pi=zeros, d=zeros, du=zeros, d2u=zeros)
    assert list(label_regions(br, atol=1e-12)) == [NT, SR, BR]


class TestComplementarity:
    def test_sell_wedge_everywhere_is_flagged(self, sol1):
        P = sol1.params
        a = wedge_constants(sol1).a
        u = a / P.p * (1 - P.mu * sol1.z) ** P.p
        fake = Solution.from_values(P, sol1.grid, u)
        S = hg.sell_obstacle(sol1.z, u, -a * P.mu * (1 - P.mu * sol1.z) ** (P.p - 1), P)
        assert np.max(np.abs(S)) <= 1e-12 * np.max(np.abs(u))
        rep = verify_complementarity(fake)
        assert not rep.ok
        flagged_z = fake.z[rep.flagged]
        assert np.any(flagged_z < sol1.eta1)
        assert np.any(fake.branches.F[1:-1] < 0)

    def test_single_node_perturbation_flagged(self, sol1):
        k = int(np.flatnonzero(sol1.region == NT)[len(np.flatnonzero(sol1.region == NT)) // 2])
        u = sol1.u.copy()
        u[k] += 10 * sol1.tol * sol1.scale
        fake = Solution.from_values(sol1.params, sol1.grid, u)
        fake.region = sol1.region
        rep = verify_complementarity(fake)
        assert k in rep.flagged


class TestWedgeConstants:
    def test_exact_sell_form_recovers_constant(self, sol1):
        P = sol1.params
        u = sol1.u.copy()
        sr = sol1.region == SR
        u[sr] = 3.7 / P.p * (1 - P.mu * sol1.z[sr]) ** P.p
        fake = SimpleNamespace(params=P, z=sol1.z, u=u, region=sol1.region)
        fit = wedge_constants(fake)
        assert fit.a == pytest.approx(3.7, rel=1e-10)

    def test_solution_fits_both_wedges(self, sol):
        fit = wedge_constants(sol)
        assert fit.a > 0 and fit.b > 0
        assert fit.err_sell <= 10 * sol.tol and fit.err_buy <= 10 * sol.tol

    def test_missing_region_gives_no_constant(self):
        s = cached_solve(3, 0.3, 1.0)
        fake = SimpleNamespace(params=s.params, z=s.z, u=s.u,
                               region=np.where(s.region == SR, NT, s.region))
        fit = wedge_constants(fake)
        assert fit.a is None and fit.err_sell is None and fit.b > 0


class TestErrors:
    def test_non_convergence_carries_history(self, sol1):
        with pytest.raises(ConvergenceError) as ei:
            solve(sol1.params, sol1.grid, SolveOptions(max_iters=1))
        assert len(ei.value.history) == 1
        assert "update" in ei.value.history[0]

    def test_non_concave_values_rejected(self, sol1):
        u = sol1.u.copy()
        u += 0.5 * sol1.scale * (sol1.z - sol1.z.mean()) ** 2
        fake = Solution.from_values(sol1.params, sol1.grid, u)
        with pytest.raises(NonConcaveError) as ei:
            _check_concavity(fake)
        assert len(ei.value.nodes) > 0

    @pytest.mark.parametrize("kw", [dict(tol=0.0), dict(max_iters=0), dict(damping=0.0),
                                    dict(damping=1.5), dict(boundary_mode="free")])
    def test_bad_options(self, kw):
        with pytest.raises(ValueError):
            SolveOptions(**kw)

    def test_invalid_params_refused(self):
        from notrade.model import InvalidParamsError
        with pytest.raises(InvalidParamsError):
            solve(scenario(1).with_(rho=1.0))
