import numpy as np
import pytest

from stackgame import AssumptionViolated, BlowUp, GameSpec
from stackgame import riccati

from conftest import scalar_spec


def test_decoupled_leader_blocks():
    aug = riccati.build_augmented(scalar_spec(B2=0.0, D2=0.0))
    B1 = aug.pieces[0]["B1"]
    assert np.allclose(B1, [[1.0, 0.0], [0.0, 0.0]])


def test_zero_follower_weights_blocks():
    aug = riccati.build_augmented(scalar_spec(Q2=0.0, Phi2=0.0))
    assert np.allclose(aug.pieces[0]["Q1"], [[1.0, 0.0], [0.0, 0.0]])
    assert np.allclose(aug.Phi_hat, [[1.0, 0.0], [0.0, 0.0]])


def test_zero_data_gives_zero():
    sp = scalar_spec(Q1=0.0, Q2=0.0, Phi1=0.0, Phi2=0.0)
    sol = riccati.solve_riccati(riccati.build_augmented(sp), grid=50)
    assert np.max(np.abs(sol.R)) == 0.0 and np.max(np.abs(sol.Xi)) == 0.0


def test_quadrature_case_is_linear():
    sp = GameSpec.scalar(T=1.0, Q1=1.0, Q2=0.5, Phi1=2.0, Phi2=0.25)
    aug = riccati.build_augmented(sp)
    sol = riccati.solve_riccati(aug, grid=20)
    for t, R in zip(sol.times, sol.R):
        assert np.allclose(R, aug.Phi_hat + aug.pieces[0]["Q1"] * (1.0 - t), atol=1e-14)


def test_terminal_condition_and_rk4_order(spec):
    aug = riccati.build_augmented(spec)
    sols = {M: riccati.solve_riccati(aug, grid=M) for M in (10, 20, 40)}
    assert np.array_equal(sols[10].R[-1], aug.Phi_hat)
    d1 = np.max(np.abs(sols[10].R[0] - sols[20].R[0]))
    d2 = np.max(np.abs(sols[20].R[0] - sols[40].R[0]))
    assert d1 / d2 >= 8.0


def test_piecewise_coefficients_on_grid():
    from stackgame import PiecewiseConstant

    sp = scalar_spec(T=1.0).replace(A=PiecewiseConstant([0.0, 0.37], [[[0.2]], [[-0.4]]]))
    sol = riccati.solve_riccati(riccati.build_augmented(sp), grid=10)
    assert np.any(np.isclose(sol.times, 0.37))


def test_blow_up_reported():
    # negative terminal weight: dK/dt = K^2, K(2) = -1 escapes at t = 1
    sp = GameSpec.scalar(T=2.0, B1=1.0, Phi1=-1.0)
    with pytest.raises(BlowUp) as err:
        riccati.solve_riccati(riccati.build_augmented(sp), grid=2000)
    assert abs(err.value.escape_time - 1.0) < 0.01


def test_upsilon_identity_case():
    sp = scalar_spec(Q2=0.0, Phi2=0.0, B2=0.0, D2=0.0)
    ut = riccati.upsilon_transform(sp)
    assert ut.lam == 0.0 and ut.mu == 0.0 and np.array_equal(ut.Upsilon, np.eye(2))


def test_upsilon_unit_ratios_values():
    b = 0.8
    sp = GameSpec.scalar(T=0.5, A=0.1, B1=b, B2=b, C=0.2, D1=0.3, D2=0.3, Q1=1.0, Q2=1.0, Phi1=0.5, Phi2=0.5,
                         R1=2.0, R2=2.0)
    ut = riccati.upsilon_transform(sp)
    assert ut.lam == 1.0 and ut.mu == 1.0
    s = b * b / 2.0
    assert np.allclose(ut.bar_pieces[0]["B1"], [[3 * s, -s], [-s, 2 * s]], atol=1e-15)
    assert ut.max_asymmetry() <= 1e-12


def test_upsilon_rejects_bad_ratios():
    with pytest.raises(AssumptionViolated):
        riccati.upsilon_transform(scalar_spec(Q2=0.5, Phi2=0.4))
    two = GameSpec(2, 1, 1, 1.0, [1.0, 0.0], A=np.eye(2), B1=np.ones((2, 1)), B2=np.ones((2, 1)),
                   C=np.zeros((2, 2)), D1=np.zeros((2, 1)), D2=np.zeros((2, 1)), Q1=np.eye(2),
                   Q2=np.eye(2), R1=[[1.0]], R2=[[1.0]], Phi1=np.eye(2), Phi2=np.eye(2))
    with pytest.raises(AssumptionViolated):
        riccati.upsilon_transform(two)


def test_symmetrized_solution_consistent(spec):
    ut = riccati.upsilon_transform(spec)
    sym = riccati.solve_symmetrized_riccati(ut, grid=400)
    direct = riccati.solve_riccati(riccati.build_augmented(spec), grid=400)
    assert np.max(np.abs(sym.R - direct.R)) <= 1e-8
    assert np.max(np.abs(sym.bar.R - np.transpose(sym.bar.R, (0, 2, 1)))) <= 1e-10
    assert np.array_equal(sym.bar.R[-1], ut.Phi_bar)


def test_tang_trivial_and_closed_forms():
    z = riccati.solve_tang_riccati(0, 1, 0, 0, 0, 1, 0, 100, T=1.0)
    assert np.max(np.abs(z.K)) == 0.0 and np.max(np.abs(z.Z)) == 0.0
    # dK/dt = K^2 - 1, K(1) = 1/2  =>  K(t) = tanh(1 - t + artanh(1/2))
    s = riccati.solve_tang_riccati(0, 1, 0, 0, 1, 1, 0.5, 1000, T=1.0)
    assert abs(s.K[0][0, 0] - np.tanh(1.0 + np.arctanh(0.5))) <= 1e-8
    assert abs(np.tanh(1.0 + np.arctanh(0.5)) - 0.9136709) < 1e-7
    one = riccati.solve_tang_riccati(0, 1, 0, 0, 1, 1, 1.0, 50, T=1.0)
    assert np.allclose(one.K, 1.0, atol=1e-14)


def test_tang_gain_shape_and_terminal():
    s = riccati.solve_tang_riccati(0.2, 0.5, 0.3, 0.1, 0.5, 1.0, 0.5, 200, T=0.3)
    assert s.K[-1][0, 0] == 0.5
    assert s.gain(0).shape == (1, 1)


def test_duality_first_order(spec):
    from stackgame import Lattice
    from stackgame.fbsde import solve_leader_system

    aug = riccati.build_augmented(spec)
    ric = riccati.solve_riccati(aug, grid=1000)
    errs = []
    for N in (4, 8):
        errs.append(riccati.duality_errors(spec, aug, ric, solve_leader_system(spec, Lattice(spec.T, N))))
    # values at N = 4, 8 for this instance: about 0.022 / 0.011 (P) and 0.018 / 0.009 (Q)
    assert errs[0][0] / errs[1][0] >= 1.8 and errs[0][1] / errs[1][1] >= 1.8
    assert abs(errs[0][0] - 0.0220) < 1e-3 and abs(errs[1][0] - 0.0110) < 1e-3
