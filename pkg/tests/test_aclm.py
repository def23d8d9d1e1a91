import copy

import numpy as np
import pytest

from stackgame import AssumptionViolated, Interval, Lattice, NodeProcess
from stackgame import aclm

from conftest import scalar_spec


@pytest.fixture(scope="module")
def solved():
    sp = scalar_spec(T=1.0)
    return sp, aclm.solve_aclm(sp, Lattice(1.0, 8), 0.5)


def test_converged_solution_properties(solved):
    sp, sol = solved
    assert sol.residual <= 1e-8
    assert aclm.reconstruction_residual(sp, sol) <= 1e-8
    assert max(float(np.max(np.abs(a))) for a in sol.u2.layers) <= 0.5
    rep = aclm.h3_stationarity_check(sp, sol)
    assert rep.max_residual <= 1e-8 and rep.sign_consistent
    assert np.all(sol.alpha[0] == 0.0)
    N = sol.lattice.N
    assert np.allclose(sol.gamma[N], sp.Phi2[0, 0]) and np.allclose(sol.beta[N] + sp.Phi2[0, 0] * sol.alpha[N], 1.0)


def test_zero_follower_weight_decouples():
    sp = scalar_spec(Q2=0.0, Phi2=0.0)
    sol = aclm.solve_aclm(sp, Lattice(sp.T, 5), 0.5)
    assert sol.residual <= 1e-10
    for name in ("gamma", "delta2", "u2", "switch"):
        assert getattr(sol, name).max_abs() == 0.0
    # alpha is still driven by the follower channel through P1; it vanishes only without one
    assert sol.alpha.max_abs() > 0.0
    silent = aclm.solve_aclm(scalar_spec(Q2=0.0, Phi2=0.0, B2=0.0, D2=0.0), Lattice(sp.T, 5), 0.5)
    assert silent.alpha.max_abs() == 0.0
    # open-loop strategy: sgn(0) = 0 leaves no feedback
    x = sol.x[2][1, 0]
    assert aclm.leader_strategy(sol, 2 * sol.lattice.dt, x + 1.0, node=1) == pytest.approx(sol.u1[2][1, 0])


def test_reduced_form_without_diffusion_control():
    # with D1 = D2 = 0 the integrand of P1 = beta x is (1 + a dt) beta2 + C E[beta]
    sp = scalar_spec(D1=0.0, D2=0.0)
    lat = Lattice(sp.T, 5)
    sol = aclm.solve_aclm(sp, lat, 0.5)
    dt = lat.dt
    for i in range(lat.N):
        a = sp.A(0)[0, 0] - sp.B1(0)[0, 0] ** 2 * sol.pbar1[i][:, 0] - sp.B2(0)[0, 0] ** 2 * sol.pbar2[i][:, 0]
        bbar = lat.expectation_step(sol.beta[i + 1][:, 0])
        want = (1 + a * dt) * sol.beta2[i][:, 0] + sp.C(0)[0, 0] * bbar
        assert np.allclose(sol.delta1[i][:, 0], want, atol=1e-12)
        # strategy has no diffusion terms: u = u2 (x - x*) - R1^-1 B1 P1bar x*
        x = sol.x[i][:, 0]
        assert np.allclose(sol.u2[i][:, 0] * x + sol.u1[i][:, 0], -sp.B1(0)[0, 0] * sol.pbar1[i][:, 0] * x,
                           atol=1e-12)


def test_strategy_on_reference_path(solved):
    sp, sol = solved
    lat = sol.lattice
    for i in (0, 3, 7):
        for j in range(0, lat.size(i), max(1, lat.size(i) // 3)):
            x = sol.x[i][j, 0]
            want = -(sp.B1(0)[0, 0] * sol.pbar1[i][j, 0] + sp.D1(0)[0, 0] * sol.delta1[i][j, 0]) * x
            assert aclm.leader_strategy(sol, lat.time(i), x, node=j) == pytest.approx(want, abs=1e-12)


def test_strategy_off_grid_time_rejected(solved):
    _, sol = solved
    with pytest.raises(ValueError):
        aclm.leader_strategy(sol, 0.5 * sol.lattice.dt, 1.0)


def test_corrupted_u1_is_flagged(solved):
    sp, sol = solved
    bad = copy.copy(sol)
    layers = [a.copy() for a in sol.u1.layers]
    layers[4][3, 0] += 0.25
    bad.u1 = NodeProcess(sol.lattice, layers)
    rep = aclm.h3_stationarity_check(sp, bad)
    assert rep.flagged() == [(4, 3)]
    assert abs(abs(rep.residual[4][3]) - 0.25 * sp.R1(0)[0, 0]) < 1e-12


def test_preconditions():
    with pytest.raises(AssumptionViolated):
        aclm.solve_aclm(scalar_spec(gamma2=Interval(-1, 1)), Lattice(0.3, 3), 0.5)
    with pytest.raises(ValueError):
        aclm.solve_aclm(scalar_spec(), Lattice(0.3, 3), 0.0)


def test_continuous_rates_match_discrete_limit():
    # without diffusion control the discrete and continuous Δ agree up to O(dt)
    sp = scalar_spec(D1=0.0, D2=0.0)
    r = aclm.continuous_rates(sp, 0.0, 0.0, 1.0, 0.5, 0.2, 0.1, 0.5)
    assert r["delta1"] == pytest.approx(1.0 * 0.3 + 0.2)
    assert r["delta2"] == pytest.approx(0.5 * 0.3 + 0.1)


def test_rows_export(solved):
    _, sol = solved
    head, rows = sol.to_rows()
    assert head[0] == "t" and len(rows) == sum(sol.lattice.size(i) for i in range(sol.lattice.N))
