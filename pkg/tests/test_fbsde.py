import copy

import numpy as np
import pytest

from stackgame import Interval, Lattice, NodeProcess, NotConverged
from stackgame import fbsde
from stackgame.riccati import solve_tang_riccati

from conftest import scalar_spec


def zeros_u(lat, m=1):
    return [np.zeros((lat.size(i), m)) for i in range(lat.N)]


def test_follower_with_zero_weights():
    sp = scalar_spec(Q2=0.0, Phi2=0.0, gamma2=Interval(0.1, 0.5))
    lat = Lattice(sp.T, 4)
    sol = fbsde.solve_follower(sp, lat, zeros_u(lat))
    assert sol.p2.max_abs() == 0.0 and sol.q2.max_abs() == 0.0
    assert all(np.all(v == 0.1) for v in sol.v.layers)
    # x is the forward SDE under the constant follower control
    x = fbsde.tree_states(sp, lat, zeros_u(lat), [np.full((lat.size(i), 1), 0.1) for i in range(4)])
    assert all(np.allclose(a, b, atol=1e-15) for a, b in zip(sol.x.layers, x))


def test_leader_with_zero_weights():
    sp = scalar_spec(Q1=0.0, Q2=0.0, Phi1=0.0, Phi2=0.0)
    lat = Lattice(sp.T, 4)
    sol = fbsde.solve_leader_system(sp, lat)
    for proc in (sol.p1, sol.p2, sol.q1, sol.q2, sol.k, sol.u, sol.v):
        assert proc.max_abs() == 0.0
    assert sol.iterations <= 2


def test_picard_contracts_and_satisfies_max_principle(spec):
    lat = Lattice(spec.T, 6)
    sol = fbsde.solve_leader_system(spec, lat)
    assert sol.residual <= 1e-10 and 0 < sol.contraction < 1
    rep = fbsde.max_principle_residual(spec, lat, sol)
    assert rep.max_residual <= 1e-8 and rep.max_violation <= 1e-8
    assert sol.clamped_fraction == 0.0 and not sol.clamp_warning


def test_continuation_single_step_matches_picard(spec):
    lat = Lattice(spec.T, 4)
    a = fbsde.solve_leader_system(spec, lat)
    b = fbsde.solve_by_continuation(spec, lat, "leader", steps=1)
    c = fbsde.solve_by_continuation(spec, lat, "leader", steps=8)
    for s in (b, c):
        assert s.residual <= 1e-10
        assert s.u.distance(a.u) < 1e-9 and s.v.distance(a.v) < 1e-9 and s.p1.distance(a.p1) < 1e-9


def test_continuation_base_level_is_one_sweep(spec):
    # alpha = 0 is decoupled: solved exactly, no fixed-point iterations
    lat = Lattice(spec.T, 3)
    system = fbsde._TreeSystem(spec, lat, "leader")
    X, P, Z, _ = fbsde._decoupled_solve(system, 0.0, fbsde._zero_sources(system))
    assert all(np.all(x == spec.x0[0]) for x in (X[i][:, 0] for i in range(lat.N + 1)))
    assert all(np.max(np.abs(p)) == 0.0 for p in P)


def test_follower_continuation_matches_picard(spec):
    lat = Lattice(spec.T, 4)
    u = [np.full((lat.size(i), 1), -0.3) for i in range(lat.N)]
    a = fbsde.solve_follower(spec, lat, u)
    b = fbsde.solve_by_continuation(spec, lat, "follower", steps=4, leader_controls=u)
    assert b.v.distance(a.v) < 1e-9 and b.p2.distance(a.p2) < 1e-9


def test_plain_picard_fails_where_continuation_succeeds():
    sp = scalar_spec(T=1.0)
    lat = Lattice(1.0, 6)
    with pytest.raises(NotConverged) as err:
        fbsde.solve_leader_system(sp, lat)
    hist = err.value.history
    assert hist[-1] > hist[0]
    sol = fbsde.solve_by_continuation(sp, lat, "leader", steps=8)
    assert sol.residual <= 1e-10 and max(sol.level_ratios) < 1


def test_linear_gains_match_tree(spec):
    lat = Lattice(spec.T, 6)
    sol = fbsde.solve_leader_system(spec, lat)
    lin = fbsde.linear_lattice_solution(spec, 6)
    for i in range(lat.N):
        X = np.hstack([sol.x[i], sol.k[i]])
        assert np.allclose(sol.u[i], X @ lin.Ku[i].T, atol=1e-9)
        assert np.allclose(sol.v[i], X @ lin.Kv[i].T, atol=1e-9)
    assert np.allclose(fbsde.solution_costs(spec, sol), lin.costs(spec), atol=1e-10)


def test_linear_gains_need_full_space():
    with pytest.raises(ValueError):
        fbsde.linear_lattice_solution(scalar_spec(gamma2=Interval(-1, 1)), 4)


def test_refinement_of_leader_gains(spec):
    gains = {N: fbsde.linear_lattice_solution(spec, N) for N in (4, 8, 16, 32)}

    def gap(N):
        a, b = gains[N], gains[2 * N]
        return max(float(np.max(np.abs(a.Ku[i] - b.Ku[2 * i]))) for i in range(N))

    assert gap(4) / gap(8) >= 1.8 and gap(8) / gap(16) >= 1.8


def test_perturbed_control_is_detected(spec):
    lat = Lattice(spec.T, 3)
    sol = fbsde.solve_leader_system(spec, lat)
    bad = copy.copy(sol)
    layers = [a.copy() for a in sol.v.layers]
    layers[2][1, 0] += 0.1
    bad.v = NodeProcess(lat, layers)
    rep = fbsde.max_principle_residual(spec, lat, bad)
    assert abs(rep.r_v[2][1] - 0.1) < 1e-9
    assert rep.vi_violation_v[2][1] > 1e-3
    others = np.delete(rep.r_v[2], 1)
    assert np.all(others < 1e-9)


def test_full_space_residual_is_stationarity(spec):
    lat = Lattice(spec.T, 3)
    sol = fbsde.solve_leader_system(spec, lat)
    rep = fbsde.max_principle_residual(spec, lat, sol)
    for a, b in zip(rep.r_v, rep.stationarity_v):
        assert np.allclose(a, b, atol=1e-15)  # R2 = 1


def test_ito_product_identity(spec):
    lat = Lattice(spec.T, 8)
    u = [np.full((lat.size(i), 1), 0.2) for i in range(lat.N)]
    sol = fbsde.solve_follower(spec, lat, u)
    direct, tele = fbsde.ito_product_check(spec, lat, sol)
    assert abs(direct - tele) <= 1e-8


def test_follower_matches_riccati_prediction():
    # leader control fixed at zero: p2 = K x with K from the single-player Riccati equation
    errs = []
    for N in (4, 8):
        sp = scalar_spec(T=0.5)
        lat = Lattice(sp.T, N)
        sol = fbsde.solve_follower(sp, lat, zeros_u(lat))
        tang = solve_tang_riccati(sp.A(0), sp.B2(0), sp.C(0), sp.D2(0), sp.Q2(0), sp.R2(0), sp.Phi2,
                                  2000, T=sp.T)
        errs.append(abs(sol.p2[0][0, 0] - tang.K[0][0, 0] * sp.x0[0]))
    assert errs[0] < 0.05 and errs[1] < 0.6 * errs[0]


def test_constrained_solution_clamps(constrained_spec):
    lat = Lattice(constrained_spec.T, 3)
    sol = fbsde.solve_leader_system(constrained_spec, lat)
    assert 0 < sol.clamped_fraction < 1 and sol.clamp_warning
    assert all(np.all((v >= -0.21 - 1e-15) & (v <= 0.3)) for v in sol.v.layers)
    assert fbsde.max_principle_residual(constrained_spec, lat, sol).max_residual <= 1e-8


def test_recombining_lattice_rejected(spec):
    with pytest.raises(ValueError):
        fbsde.solve_leader_system(spec, Lattice(spec.T, 4, recombining=True))
