"""Scalar closed-loop memoryless leader problem on the full tree.

The leader uses affine feedback ``u = u2 x + u1`` with ``|u2| <= K``.  Writing
``χ = αx``, ``p1 = βx``, ``p2 = γx`` and ``q_j = Δ_j x`` turns the leader's
Hamiltonian system into a system for the node coefficients (α, β, γ) alone.

On the tree every quantity is taken per node, with the same conventions as
``fbsde``: conditional means ``p̄`` drive the controls, so with ``P̄_j = p̄_j / x``
the successor states are ``x(1 + a dt ± c √dt)`` and

    P̄ = β̄(1 + a dt) + β̂ c dt,     Δ = β̂(1 + a dt) + β̄ c

where ``β̄``/``β̂`` are the conditional mean and integrand of the successor
values.  Since ``a`` and ``c`` are affine in ``(P̄1, Δ1, P̄2, Δ2)`` this is a
4×4 linear system per node.  The discrete Hamiltonian system is then
satisfied exactly by the reconstructed processes.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionViolated, NotConverged, SingularMatrix
from .lattice import Lattice, NodeProcess

TOL_FIX = 1e-10
MAX_ITER = 500
RELAX = 0.5
DET_GUARD = 1e-12


def _scalars(spec, t):
    c = spec.coeffs(t)
    g = lambda M: float(M[0, 0])  # noqa: E731
    return {k: g(getattr(c, k)) for k in ("A", "B1", "B2", "C", "D1", "D2", "Q1", "Q2", "R1", "R2")}


def _check(spec, K):
    if not (spec.n == spec.m1 == spec.m2 == 1):
        raise AssumptionViolated("the closed-loop solver is scalar only",
                                 [f"n, m1, m2 = {spec.n}, {spec.m1}, {spec.m2}"])
    if not spec.gamma2.is_full:
        raise AssumptionViolated("the closed-loop solver needs an unconstrained follower",
                                 [f"gamma2 = {spec.gamma2.kind}"])
    if not K > 0:
        raise ValueError("gain bound K must be positive")


def _node_coefficients(k, dt, bbar, bhat, gbar, ghat):
    """Solve for (P̄1, Δ1, P̄2, Δ2) at every node of a layer."""
    r1, r2 = 1.0 / k["R1"], 1.0 / k["R2"]
    ga = np.array([-r1 * k["B1"] ** 2, -r1 * k["B1"] * k["D1"], -r2 * k["B2"] ** 2, -r2 * k["B2"] * k["D2"]])
    gc = np.array([-r1 * k["D1"] * k["B1"], -r1 * k["D1"] ** 2, -r2 * k["D2"] * k["B2"], -r2 * k["D2"] ** 2])
    S = bbar.size
    M = np.broadcast_to(np.eye(4), (S, 4, 4)).copy()
    rows = [(bbar * dt, bhat * dt), (bhat * dt, bbar), (gbar * dt, ghat * dt), (ghat * dt, gbar)]
    for r, (ca, cc) in enumerate(rows):
        M[:, r, :] -= ca[:, None] * ga[None, :] + cc[:, None] * gc[None, :]
    A, C = k["A"], k["C"]
    rhs = np.stack([bbar * (1 + A * dt) + bhat * C * dt, bhat * (1 + A * dt) + bbar * C,
                    gbar * (1 + A * dt) + ghat * C * dt, ghat * (1 + A * dt) + gbar * C], axis=1)
    det = np.linalg.det(M)
    if np.min(np.abs(det)) < DET_GUARD:
        raise SingularMatrix(f"node coefficient system is singular (|det| = {np.min(np.abs(det)):.3e})")
    y = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
    a = A + y @ ga
    c = C + y @ gc
    return y, a, c


@dataclass
class AclmSolution:
    lattice: Lattice
    K: float
    alpha: NodeProcess
    beta: NodeProcess
    gamma: NodeProcess
    alpha2: NodeProcess
    beta2: NodeProcess
    gamma2: NodeProcess
    pbar1: NodeProcess
    delta1: NodeProcess
    pbar2: NodeProcess
    delta2: NodeProcess
    switch: NodeProcess
    u2: NodeProcess
    u1: NodeProcess
    x: NodeProcess
    residual: float
    iterations: int
    history: list = field(default_factory=list)

    def layer_mean(self, name, i):
        proc = getattr(self, name)
        return float(self.lattice.weights(i) @ proc[i][:, 0])

    def to_rows(self):
        head = ["t", "node", "alpha", "beta", "gamma", "delta1", "delta2", "u2", "u1", "x"]
        rows = []
        lat = self.lattice
        for i in range(lat.N):
            for j in range(lat.size(i)):
                rows.append([lat.time(i), j, self.alpha[i][j, 0], self.beta[i][j, 0],
                             self.gamma[i][j, 0], self.delta1[i][j, 0], self.delta2[i][j, 0],
                             self.u2[i][j, 0], self.u1[i][j, 0], self.x[i][j, 0]])
        return head, rows


def _sweeps(spec, lat, K, alpha, sigma):
    N, dt = lat.N, lat.dt
    sgn = [np.sign(s) for s in sigma]
    beta = [None] * (N + 1)
    gamma = [None] * (N + 1)
    Y, AC = [None] * N, [None] * N
    beta[N] = spec.Phi1[0, 0] - spec.Phi2[0, 0] * alpha[N]
    gamma[N] = np.full(lat.size(N), spec.Phi2[0, 0])
    for i in range(N - 1, -1, -1):
        k = _scalars(spec, lat.time(i))
        bbar, bhat = lat.expectation_step(beta[i + 1]), lat.integrand_step(beta[i + 1])
        gbar, ghat = lat.expectation_step(gamma[i + 1]), lat.integrand_step(gamma[i + 1])
        y, a, c = _node_coefficients(k, dt, bbar, bhat, gbar, ghat)
        u2 = sgn[i] * K
        beta[i] = y[:, 0] + (k["A"] * y[:, 0] + k["C"] * y[:, 1] - k["Q2"] * alpha[i] + k["Q1"]) * dt
        gamma[i] = y[:, 2] + ((k["A"] + k["B1"] * u2) * y[:, 2] + (k["C"] + k["D1"] * u2) * y[:, 3]
                              + k["Q2"]) * dt
        Y[i], AC[i] = y, (a, c)
    new_alpha = [np.zeros(1)]
    for i in range(N):
        k = _scalars(spec, lat.time(i))
        y, (a, c) = Y[i], AC[i]
        u2 = sgn[i] * K
        r2 = 1.0 / k["R2"]
        al = new_alpha[i]
        drift = (k["A"] + k["B1"] * u2) * al + r2 * k["B2"] ** 2 * y[:, 0] + r2 * k["D2"] * k["B2"] * y[:, 1]
        diff = (k["C"] + k["D1"] * u2) * al + r2 * k["B2"] * k["D2"] * y[:, 0] + r2 * k["D2"] ** 2 * y[:, 1]
        xi = lat.xi(i + 1)
        ratio = lat.expand(1 + a * dt) + lat.expand(c) * xi
        if np.min(np.abs(ratio)) < 1e-12:
            raise SingularMatrix("reference state hits zero; the ratio ansatz breaks down")
        new_alpha.append((lat.expand(al + drift * dt) + lat.expand(diff) * xi) / ratio)
    switch = []
    for i in range(N):
        k = _scalars(spec, lat.time(i))
        switch.append(new_alpha[i] * (k["B1"] * Y[i][:, 2] + k["D1"] * Y[i][:, 3]))
    return beta, gamma, Y, AC, new_alpha, switch


def solve_aclm(spec, lattice, K, tol=TOL_FIX, max_iter=MAX_ITER, relax=RELAX):
    """Picard iteration for the node coefficients (α, β, γ) and the switching rule."""
    _check(spec, K)
    if lattice.recombining:
        raise ValueError("the closed-loop solver runs on the full tree")
    lat, N = lattice, lattice.N
    alpha = [np.zeros(lat.size(i)) for i in range(N + 1)]
    sigma = [np.zeros(lat.size(i)) for i in range(N)]
    beta = gamma = None
    history = []
    for it in range(1, max_iter + 1):
        b_new, g_new, Y, AC, a_new, sw = _sweeps(spec, lat, K, alpha, sigma)
        s_new = [(1 - relax) * s + relax * w for s, w in zip(sigma, sw)]
        res = max(max(float(np.max(np.abs(x - y))) for x, y in zip(a_new, alpha)),
                  max(float(np.max(np.abs(x - y))) for x, y in zip(s_new, sigma)))
        if beta is not None:
            res = max(res, max(float(np.max(np.abs(x - y))) for x, y in zip(b_new, beta)),
                      max(float(np.max(np.abs(x - y))) for x, y in zip(g_new, gamma)))
        else:
            res = max(res, 1.0)
        history.append(res)
        alpha, sigma, beta, gamma = a_new, s_new, b_new, g_new
        # converged once the coefficients are stationary and the relaxed switching
        # function has the same signs as the fresh one
        if res <= tol and all(np.array_equal(np.sign(s), np.sign(w)) for s, w in zip(sigma, sw)):
            break
        if not np.isfinite(res) or res > 1e12:
            raise NotConverged(f"closed-loop iteration diverged (residual {res:.3e})", history)
    else:
        raise NotConverged(f"closed-loop iteration stalled at residual {history[-1]:.3e}", history)
    # final consistent pass with the switching signs frozen at their converged value
    sigma = sw
    beta, gamma, Y, AC, alpha_chk, sw = _sweeps(spec, lat, K, alpha, sigma)
    history.append(max(float(np.max(np.abs(x - y))) for x, y in zip(alpha_chk, alpha)))
    return _assemble(spec, lat, K, alpha, beta, gamma, Y, AC, sigma, history, it)


def _assemble(spec, lat, K, alpha, beta, gamma, Y, AC, sigma, history, iterations):
    N, dt = lat.N, lat.dt
    x = [np.array([spec.x0[0]])]
    for i in range(N):
        a, c = AC[i]
        x.append(lat.expand(x[i] * (1 + a * dt)) + lat.expand(x[i] * c) * lat.xi(i + 1))
    u2 = [np.sign(s) * K for s in sigma]
    u1 = []
    for i in range(N):
        k = _scalars(spec, lat.time(i))
        u1.append(-u2[i] * x[i] - (k["B1"] * Y[i][:, 0] + k["D1"] * Y[i][:, 1]) * x[i] / k["R1"])
    col = lambda arrs: NodeProcess(lat, [np.asarray(a, dtype=float).reshape(-1, 1) for a in arrs])  # noqa: E731
    return AclmSolution(
        lat, float(K), col(alpha), col(beta), col(gamma),
        col([lat.integrand_step(alpha[i + 1]) for i in range(N)]),
        col([lat.integrand_step(beta[i + 1]) for i in range(N)]),
        col([lat.integrand_step(gamma[i + 1]) for i in range(N)]),
        col([y[:, 0] for y in Y]), col([y[:, 1] for y in Y]),
        col([y[:, 2] for y in Y]), col([y[:, 3] for y in Y]),
        col(sigma), col(u2), col(u1), col(x), history[-1], iterations, history)


def _surrogate(sol, spec, i):
    """Layer expectations of the feedback gain and offset (deterministic strategy)."""
    w = sol.lattice.weights(i)
    k = _scalars(spec, sol.lattice.time(i))
    gain = sol.u2[i][:, 0]
    offset = sol.u1[i][:, 0]
    return float(w @ gain), float(w @ offset), k


def leader_strategy(sol, t, x, node=None, spec=None):
    """Feedback ``u(t, x) = u2 (x − x*) − R1⁻¹(B1 P̄1 + D1 Δ1) x*`` at time ``t``.

    With ``node`` given the coefficients of that lattice node are used;
    otherwise the layer expectation of gain and offset (needs ``spec`` only
    for validation of the time index).
    """
    lat = sol.lattice
    i = int(round(t / lat.dt))
    if abs(i * lat.dt - t) > 1e-9 * max(1.0, lat.T) or not 0 <= i < lat.N:
        raise ValueError("t must be a non-terminal lattice time")
    if node is not None:
        u2 = sol.u2[i][node, 0]
        return float(u2 * x + sol.u1[i][node, 0])
    w = lat.weights(i)
    return float((w @ sol.u2[i][:, 0]) * x + w @ sol.u1[i][:, 0])


def strategy_coefficients(sol):
    """Per-layer deterministic surrogate ``u = g(t) x + h(t)`` (layer expectations)."""
    lat = sol.lattice
    g = np.array([lat.weights(i) @ sol.u2[i][:, 0] for i in range(lat.N)])
    h = np.array([lat.weights(i) @ sol.u1[i][:, 0] for i in range(lat.N)])
    return g, h


@dataclass
class H3Report:
    residual: list
    sign_consistent: bool
    zero_switch_nodes: list

    @property
    def max_residual(self):
        return max(float(np.max(np.abs(r))) for r in self.residual)

    def flagged(self, tol=1e-8):
        return [(i, int(j)) for i, r in enumerate(self.residual) for j in np.flatnonzero(np.abs(r) > tol)]


def h3_stationarity_check(spec, sol):
    """``|B1 p̄1 + D1 q1 + R1(u2 x + u1)|`` per node and the bang-bang sign rule."""
    lat = sol.lattice
    res, zero_nodes = [], []
    consistent = True
    for i in range(lat.N):
        k = _scalars(spec, lat.time(i))
        x = sol.x[i][:, 0]
        p1bar = sol.pbar1[i][:, 0] * x
        q1 = sol.delta1[i][:, 0] * x
        res.append(k["B1"] * p1bar + k["D1"] * q1 + k["R1"] * (sol.u2[i][:, 0] * x + sol.u1[i][:, 0]))
        sw = sol.switch[i][:, 0]
        want = np.sign(sw) * sol.K
        consistent = consistent and bool(np.all(sol.u2[i][:, 0] == want))
        zero_nodes += [(i, int(j)) for j in np.flatnonzero(sw == 0.0)]
    return H3Report(res, consistent, zero_nodes)


def reconstruction_residual(spec, sol):
    """Max node defect of the discrete Hamiltonian system under ``χ = αx`` etc."""
    lat, dt = sol.lattice, sol.lattice.dt
    N = lat.N
    x = [sol.x[i][:, 0] for i in range(N + 1)]
    chi = [sol.alpha[i][:, 0] * x[i] for i in range(N + 1)]
    p1 = [sol.beta[i][:, 0] * x[i] for i in range(N + 1)]
    p2 = [sol.gamma[i][:, 0] * x[i] for i in range(N + 1)]
    worst = abs(chi[0][0])
    worst = max(worst, float(np.max(np.abs(p1[N] - (spec.Phi1[0, 0] * x[N] - spec.Phi2[0, 0] * chi[N])))))
    worst = max(worst, float(np.max(np.abs(p2[N] - spec.Phi2[0, 0] * x[N]))))
    for i in range(N):
        k = _scalars(spec, lat.time(i))
        xi = lat.xi(i + 1)
        p1b, q1 = lat.expectation_step(p1[i + 1]), lat.integrand_step(p1[i + 1])
        p2b, q2 = lat.expectation_step(p2[i + 1]), lat.integrand_step(p2[i + 1])
        # the integrands must be the Δ's times x and the means the P̄'s times x
        worst = max(worst, float(np.max(np.abs(q1 - sol.delta1[i][:, 0] * x[i]))),
                    float(np.max(np.abs(q2 - sol.delta2[i][:, 0] * x[i]))),
                    float(np.max(np.abs(p1b - sol.pbar1[i][:, 0] * x[i]))),
                    float(np.max(np.abs(p2b - sol.pbar2[i][:, 0] * x[i]))))
        u = -(k["B1"] * p1b + k["D1"] * q1) / k["R1"]
        v = -(k["B2"] * p2b + k["D2"] * q2) / k["R2"]
        x_next = lat.expand(x[i] + (k["A"] * x[i] + k["B1"] * u + k["B2"] * v) * dt) + \
            lat.expand(k["C"] * x[i] + k["D1"] * u + k["D2"] * v) * xi
        worst = max(worst, float(np.max(np.abs(x_next - x[i + 1]))))
        u2 = sol.u2[i][:, 0]
        r2 = 1.0 / k["R2"]
        chi_next = lat.expand(chi[i] + ((k["A"] + k["B1"] * u2) * chi[i] + r2 * k["B2"] ** 2 * p1b
                                        + r2 * k["D2"] * k["B2"] * q1) * dt) + \
            lat.expand((k["C"] + k["D1"] * u2) * chi[i] + r2 * k["B2"] * k["D2"] * p1b
                       + r2 * k["D2"] ** 2 * q1) * xi
        worst = max(worst, float(np.max(np.abs(chi_next - chi[i + 1]))))
        p1_here = p1b + (k["A"] * p1b + k["C"] * q1 - k["Q2"] * chi[i] + k["Q1"] * x[i]) * dt
        p2_here = p2b + ((k["A"] + k["B1"] * u2) * p2b + (k["C"] + k["D1"] * u2) * q2 + k["Q2"] * x[i]) * dt
        worst = max(worst, float(np.max(np.abs(p1_here - p1[i]))), float(np.max(np.abs(p2_here - p2[i]))))
        # bang-bang rule evaluated on the reconstructed processes
        sw = chi[i] * (k["B1"] * p2b + k["D1"] * q2)
        if not np.all(np.sign(sw) == np.sign(sol.switch[i][:, 0])):
            worst = max(worst, np.inf)
    return worst


def continuous_rates(spec, t, alpha, beta, gamma, beta2, gamma2, K):
    """Continuous-time coefficients (Δ1, Δ2, α1, α2, β1, γ1) for given node values."""
    k = _scalars(spec, t)
    r1, r2 = 1.0 / k["R1"], 1.0 / k["R2"]
    d11, d22 = k["D1"] * r1 * k["D1"], k["D2"] * r2 * k["D2"]
    xi1 = beta * k["C"] - beta * k["D1"] * r1 * k["B1"] * beta - beta * k["D2"] * r2 * k["B2"] * gamma + beta2
    xi2 = gamma * k["C"] - gamma * k["D1"] * r1 * k["B1"] * beta - gamma * k["D2"] * r2 * k["B2"] * gamma + gamma2
    det = (1 + beta * d11) * (1 + gamma * d22) - beta * d22 * gamma * d11
    if abs(det) < DET_GUARD:
        raise SingularMatrix("Δ system is singular")
    delta1 = (xi1 * (1 + gamma * d22) - xi2 * beta * d22) / det
    delta2 = (xi2 * (1 + beta * d11) - xi1 * gamma * d11) / det
    e1 = r1 * (k["B1"] * beta + k["D1"] * delta1)
    e2 = r2 * (k["B2"] * gamma + k["D2"] * delta2)
    a = k["A"] - k["B1"] * e1 - k["B2"] * e2
    c = k["C"] - k["D1"] * e1 - k["D2"] * e2
    s = np.sign(alpha * (k["B1"] * gamma + k["D1"] * delta2))
    alpha2 = alpha * (k["D1"] * e1 + k["D2"] * e2) + k["D1"] * s * K * alpha + \
        r2 * k["B2"] * k["D2"] * beta + r2 * k["D2"] ** 2 * delta1
    alpha1 = k["B1"] * s * K * alpha + r2 * k["B2"] ** 2 * beta + r2 * k["D2"] * k["B2"] * delta1 + \
        alpha * (k["B1"] * e1 + k["B2"] * e2) - alpha2 * c
    beta1 = -(k["A"] * beta + k["C"] * delta1 - alpha * k["Q2"] + k["Q1"]) - beta * a - beta2 * c
    gamma1 = -((k["A"] + k["B1"] * s * K) * gamma + (k["C"] + k["D1"] * s * K) * delta2 + k["Q2"]) \
        - gamma * a - gamma2 * c
    return {"delta1": delta1, "delta2": delta2, "alpha1": alpha1, "alpha2": alpha2,
            "beta1": beta1, "gamma1": gamma1, "a": a, "c": c}


def projected_follower_residual(spec, sol, gamma2):
    """``|v − P_Γ2(v_free)|`` per node for a constrained follower set (evaluation only)."""
    from .projection import project

    lat = sol.lattice
    out = []
    for i in range(lat.N):
        k = _scalars(spec, lat.time(i))
        x = sol.x[i][:, 0]
        v_free = -(k["B2"] * sol.pbar2[i][:, 0] + k["D2"] * sol.delta2[i][:, 0]) * x / k["R2"]
        c = spec.coeffs(lat.time(i))
        out.append(np.abs(v_free - project(gamma2, c.metric2, v_free[:, None])[:, 0]))
    return out
