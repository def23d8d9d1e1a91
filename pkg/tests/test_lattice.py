import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stackgame import Lattice, NodeProcess
from stackgame.lattice import conditional_expectation, martingale_integrand


def test_sizes_and_weights():
    full, rec = Lattice(1.0, 5), Lattice(1.0, 5, recombining=True)
    assert [full.size(i) for i in range(4)] == [1, 2, 4, 8]
    assert [rec.size(i) for i in range(4)] == [1, 2, 3, 4]
    for lat in (full, rec):
        for i in range(6):
            assert abs(lat.weights(i).sum() - 1.0) < 1e-15


def test_full_tree_cap():
    with pytest.raises(ValueError):
        Lattice(1.0, 17)
    Lattice(1.0, 64, recombining=True)


def test_conditional_expectation_examples():
    lat = Lattice(1.0, 1)
    assert np.allclose(conditional_expectation(NodeProcess.constant(lat, 2.5), 0), 2.5)
    w = NodeProcess(lat, [np.zeros((1, 1)), lat.xi(1)[:, None]])
    assert np.allclose(conditional_expectation(w, 0), 0.0)
    assert np.allclose(conditional_expectation(NodeProcess(lat, [np.zeros((1, 1)), [[1.0], [3.0]]]), 0), 2.0)


def test_martingale_integrand_examples():
    lat = Lattice(0.25, 1)
    assert np.allclose(martingale_integrand(NodeProcess.constant(lat, 4.0), 0), 0.0)
    w = NodeProcess(lat, [np.zeros((1, 1)), lat.xi(1)[:, None]])
    assert np.allclose(martingale_integrand(w, 0), 1.0)
    # successors (down, up) = (1, 5), dt = 0.25: (5 - 1) / (2 * 0.5)
    assert np.allclose(martingale_integrand(NodeProcess(lat, [np.zeros((1, 1)), [[1.0], [5.0]]]), 0), 4.0)


@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_reconstruction_and_tower(N, seed):
    lat = Lattice(0.7, N)
    rng = np.random.default_rng(seed)
    proc = NodeProcess(lat, [rng.normal(size=(lat.size(i), 2)) for i in range(N + 1)])
    for i in range(N):
        m, z = conditional_expectation(proc, i), martingale_integrand(proc, i)
        recon = lat.expand(m) + lat.expand(z) * lat.xi(i + 1)[:, None]
        assert np.max(np.abs(recon - proc[i + 1])) <= 1e-14 * max(1.0, np.max(np.abs(proc[i + 1])))
    top = proc[N]
    for i in range(N - 1, -1, -1):
        top = lat.expectation_step(top)
    assert np.allclose(top[0], lat.weights(N) @ proc[N], atol=1e-13)


def test_brownian_from_function():
    lat = Lattice(1.0, 4)
    W = NodeProcess.from_function(lat, lambda i, w: w)
    assert np.allclose(W.expectation(4), 0.0)
    assert abs(lat.weights(4) @ W[4][:, 0] ** 2 - 1.0) < 1e-14
