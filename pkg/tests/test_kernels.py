import numpy as np
import pytest

from stackgame import _kernels_py, kernels, riccati, simulate

from conftest import scalar_spec


def _data(steps=30):
    sp = scalar_spec()
    aug = riccati.build_augmented(sp)
    ric = riccati.solve_riccati(aug, grid=200)
    st = simulate.riccati_strategy(sp, ric, aug, steps)
    F, f, G, g = st.closed_loop(sp)
    (W1, w1, c1), (W2, w2, c2), P1, P2 = st.cost_weights(sp)
    dt = sp.T / steps
    dW = np.random.default_rng(0).standard_normal((257, steps)) * np.sqrt(dt)
    return (st.X0, F, f, G, g, W1, w1, c1, W2, w2, c2, P1, P2, dW, dt)


def test_backend_flag():
    assert kernels.BACKEND in ("compiled", "python")


@pytest.mark.skipif(kernels.BACKEND != "compiled", reason="extension not built")
def test_compiled_matches_fallback():
    args = _data()
    Jc, Xc = kernels.affine_paths(*args)
    Jp, Xp = _kernels_py.affine_paths(*args)
    assert np.max(np.abs(Jc - Jp)) < 1e-13 and np.max(np.abs(Xc - Xp)) < 1e-13


def test_fallback_single_path_by_hand():
    X0, F, f, G, g, W1, w1, c1, W2, w2, c2, P1, P2, dW, dt = _data(steps=5)
    J, XT = _kernels_py.affine_paths(X0, F, f, G, g, W1, w1, c1, W2, w2, c2, P1, P2, dW[:1], dt)
    x = X0.copy()
    j1 = 0.0
    for k in range(5):
        j1 += (0.5 * x @ W1[k] @ x + w1[k] @ x + c1[k]) * dt
        x = x + (F[k] @ x + f[k]) * dt + (G[k] @ x + g[k]) * dW[0, k]
    j1 += 0.5 * x @ P1 @ x
    assert abs(J[0, 0] - j1) < 1e-14 and np.allclose(XT[0], x, atol=1e-15)
