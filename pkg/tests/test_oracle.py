import numpy as np
import pytest

from stackgame import Interval, Lattice
from stackgame import fbsde, oracle

from conftest import scalar_spec


def zeros_u(lat):
    return [np.zeros((lat.size(i), 1)) for i in range(lat.N)]


def test_follower_without_state_cost():
    sp = scalar_spec(Q2=0.0, Phi2=0.0, gamma2=Interval(0.1, 0.5))
    lat = Lattice(sp.T, 3)
    v, J2 = oracle.oracle_follower(sp, lat, zeros_u(lat))
    assert np.allclose(v, 0.1)
    assert J2 == pytest.approx(0.5 * 0.1**2 * sp.T)


def test_follower_full_space_matches_lattice_solver(spec):
    lat = Lattice(spec.T, 3)
    u = [np.full((lat.size(i), 1), 0.3) for i in range(lat.N)]
    res = oracle.oracle_follower(spec, lat, u)
    sol = fbsde.solve_follower(spec, lat, u)
    assert np.max(np.abs(res.v - oracle.from_layers(sol.v.layers))) <= 1e-6
    assert res.grad_map <= 1e-10


def test_follower_active_set_agrees():
    sp = scalar_spec(Q2=8.0, Phi2=4.0, gamma2=Interval(-0.5, 0.5))
    lat = Lattice(sp.T, 3)
    u = [np.full((lat.size(i), 1), 0.5) for i in range(lat.N)]
    res = oracle.oracle_follower(sp, lat, u)
    sol = fbsde.solve_follower(sp, lat, u)
    vm = oracle.from_layers(sol.v.layers)
    assert np.max(np.abs(res.v - vm)) <= 1e-6
    cl = oracle.clamped_nodes(sp.gamma2, res.v, 1)
    assert cl and cl == oracle.clamped_nodes(sp.gamma2, vm, 1)


def test_leader_without_control_channel():
    sp = scalar_spec(B1=0.0, D1=0.0, gamma1=Interval(0.2, 1.0))
    lat = Lattice(sp.T, 2)
    u, v, J1 = oracle.oracle_leader(sp, lat, restarts=4)
    assert np.allclose(u, 0.2, atol=1e-8)


def test_leader_full_space_matches_max_principle(spec):
    lat = Lattice(spec.T, 3)
    res = oracle.oracle_leader(spec, lat, restarts=4, include_max_principle=False)
    sol = fbsde.solve_leader_system(spec, lat)
    J1, J2 = fbsde.solution_costs(spec, sol)
    assert abs(res.J1 - J1) <= 1e-6
    assert np.max(np.abs(res.u - oracle.from_layers(sol.u.layers))) <= 1e-4
    assert len(res.restarts) == 4
    assert set(res.to_dict()) >= {"J1", "J2", "u", "v", "restarts"}


def test_size_limits(spec):
    with pytest.raises(ValueError):
        oracle.oracle_follower(spec, Lattice(spec.T, 7), zeros_u(Lattice(spec.T, 7)))
    with pytest.raises(ValueError):
        oracle.oracle_leader(spec, Lattice(spec.T, 5))
    with pytest.raises(ValueError):
        oracle.oracle_leader(spec, Lattice(spec.T, 2), restarts=3)


def test_layer_vector_roundtrip():
    N = 3
    vec = np.arange(oracle.node_count(N) * 2, dtype=float)
    assert np.array_equal(oracle.from_layers(oracle.to_layers(vec, N, 2)), vec)
