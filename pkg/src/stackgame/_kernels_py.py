"""Pure numpy versions of the compiled path kernels."""

import numpy as np


def affine_paths(X0, F, f, G, g, W1, w1, c1, W2, w2, c2, Phi1, Phi2, dW, dt):
    """Euler-Maruyama for ``dX = (F X + f) dt + (G X + g) dW`` with quadratic costs.

    Running cost of player j at step k is ``(½XᵀW_jX + w_j·X + c_j) dt`` at the
    left endpoint; terminal cost ``½XᵀΦ_jX``.  Returns ``(costs (P, 2), X(T))``.
    """
    P, S = dW.shape
    X = np.tile(np.asarray(X0, dtype=float), (P, 1))
    J = np.zeros((P, 2))
    for k in range(S):
        J[:, 0] += (0.5 * np.einsum("pi,ij,pj->p", X, W1[k], X) + X @ w1[k] + c1[k]) * dt
        J[:, 1] += (0.5 * np.einsum("pi,ij,pj->p", X, W2[k], X) + X @ w2[k] + c2[k]) * dt
        X = X + (X @ F[k].T + f[k]) * dt + (X @ G[k].T + g[k]) * dW[:, k:k + 1]
    J[:, 0] += 0.5 * np.einsum("pi,ij,pj->p", X, Phi1, X)
    J[:, 1] += 0.5 * np.einsum("pi,ij,pj->p", X, Phi2, X)
    return J, X
