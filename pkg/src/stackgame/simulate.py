"""Monte Carlo evaluation of strategies and perturbation probes.

Paths are generated in fixed-size blocks; block ``b`` draws its increments
from ``Philox(key=(seed, b))``, so a path's noise never depends on how the
blocks are scheduled.  Per-path costs are concatenated in block order before
any reduction, which keeps summaries identical across thread counts.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NotConverged

BLOCK = 2048
TOL_OPT = 1e-4


@dataclass
class SimConfig:
    paths: int = 10000
    steps: int = 100
    seed: int = 0
    antithetic: bool = False
    threads: int = None
    block: int = BLOCK

    def __post_init__(self):
        if self.paths < 1 or self.steps < 1:
            raise ValueError("paths and steps must be at least 1")
        if self.antithetic and self.paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")
        if self.block < 2 or self.block % 2:
            raise ValueError("block size must be even")

    def worker_count(self):
        if self.threads is not None:
            return max(1, int(self.threads))
        return max(1, int(os.environ.get("STACKGAME_THREADS", "1")))


@dataclass
class CostEstimate:
    J1: float
    J1_se: float
    J2: float
    J2_se: float
    paths: int
    terminal: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {"J1": self.J1, "J1_stderr": self.J1_se, "J2": self.J2, "J2_stderr": self.J2_se,
                "paths": self.paths}


# -- strategies -------------------------------------------------------------

@dataclass
class AffineStrategy:
    """Controls affine in an augmented state ``X = (x, extra)`` on a fixed grid.

    ``u = Ku[k] X + ku[k]``, ``v = Kv[k] X + kv[k]``; the extra components
    follow ``dX_e = (Fa X + fa) dt + (Ga X + ga) dW``.
    """

    T: float
    steps: int
    X0: np.ndarray
    Ku: np.ndarray
    ku: np.ndarray
    Kv: np.ndarray
    kv: np.ndarray
    Fa: np.ndarray = None
    fa: np.ndarray = None
    Ga: np.ndarray = None
    ga: np.ndarray = None
    label: str = "affine"

    @property
    def d(self):
        return self.X0.size

    def closed_loop(self, spec):
        """Per-step ``(F, f, G, g)`` of the augmented closed loop."""
        S, d, n = self.steps, self.d, spec.n
        dt = self.T / S
        F = np.zeros((S, d, d))
        G = np.zeros((S, d, d))
        f = np.zeros((S, d))
        g = np.zeros((S, d))
        for k in range(S):
            c = spec.coeffs(k * dt)
            F[k, :n, :n] = c.A
            G[k, :n, :n] = c.C
            F[k, :n] += c.B1 @ self.Ku[k] + c.B2 @ self.Kv[k]
            G[k, :n] += c.D1 @ self.Ku[k] + c.D2 @ self.Kv[k]
            f[k, :n] = c.B1 @ self.ku[k] + c.B2 @ self.kv[k]
            g[k, :n] = c.D1 @ self.ku[k] + c.D2 @ self.kv[k]
            if d > n:
                F[k, n:] = self.Fa[k]
                G[k, n:] = self.Ga[k]
                f[k, n:] = self.fa[k]
                g[k, n:] = self.ga[k]
        return F, f, G, g

    def cost_weights(self, spec):
        """Quadratic running-cost data ``(W, w, c)`` for both players."""
        S, d, n = self.steps, self.d, spec.n
        dt = self.T / S
        out = []
        for Kc, kc, Qn, Rn in ((self.Ku, self.ku, "Q1", "R1"), (self.Kv, self.kv, "Q2", "R2")):
            W = np.zeros((S, d, d))
            w = np.zeros((S, d))
            c0 = np.zeros(S)
            for k in range(S):
                co = spec.coeffs(k * dt)
                Q, R = getattr(co, Qn), getattr(co, Rn)
                W[k, :n, :n] = Q
                W[k] += Kc[k].T @ R @ Kc[k]
                w[k] = Kc[k].T @ R @ kc[k]
                c0[k] = 0.5 * kc[k] @ R @ kc[k]
            out.append((W, w, c0))
        P1 = np.zeros((d, d))
        P2 = np.zeros((d, d))
        P1[:n, :n] = spec.Phi1
        P2[:n, :n] = spec.Phi2
        return out[0], out[1], P1, P2


def _step_times(T, steps):
    return np.arange(steps) * (T / steps)


def riccati_strategy(spec, ric, aug, steps):
    """Unconstrained equilibrium feedback from the augmented Riccati solution."""
    n, d = spec.n, 2 * spec.n
    Ku = np.zeros((steps, spec.m1, d))
    Kv = np.zeros((steps, spec.m2, d))
    Fa = np.zeros((steps, n, d))
    Ga = np.zeros((steps, n, d))
    for k, t in enumerate(_step_times(spec.T, steps)):
        c = spec.coeffs(t)
        R = ric.at(t)
        Xi = ric.xi_at(t, aug)
        Ku[k] = -c.R1inv @ (c.B1.T @ R[:n] + c.D1.T @ Xi[:n])
        Kv[k] = -c.R2inv @ (c.B2.T @ R[n:] + c.D2.T @ Xi[n:])
        w = c.B2.T @ R[:n] + c.D2.T @ Xi[:n]
        Fa[k, :, n:] = c.A
        Ga[k, :, n:] = c.C
        Fa[k] += c.B2 @ c.R2inv @ w
        Ga[k] += c.D2 @ c.R2inv @ w
    X0 = np.concatenate([spec.x0, np.zeros(n)])
    z = lambda m: np.zeros((steps, m))  # noqa: E731
    return AffineStrategy(spec.T, steps, X0, Ku, z(spec.m1), Kv, z(spec.m2), Fa, z(n), Ga, z(n),
                          label="riccati")


def _layer_index(t, T, N):
    return min(N - 1, int(np.floor(t / (T / N) + 1e-9)))


def lattice_gain_strategy(spec, lin, steps):
    """Per-layer lattice gains held constant over each lattice step."""
    n, d = spec.n, lin.X0.size
    Ku = np.zeros((steps, spec.m1, d))
    Kv = np.zeros((steps, spec.m2, d))
    Fa = np.zeros((steps, d - n, d))
    Ga = np.zeros((steps, d - n, d))
    for k, t in enumerate(_step_times(spec.T, steps)):
        i = _layer_index(t, spec.T, lin.N)
        Ku[k], Kv[k] = lin.Ku[i], lin.Kv[i]
        Fa[k] = lin.F[i][n:]
        Ga[k] = lin.G[i][n:]
    z = lambda m: np.zeros((steps, m))  # noqa: E731
    return AffineStrategy(spec.T, steps, lin.X0.copy(), Ku, z(spec.m1), Kv, z(spec.m2),
                          Fa, z(d - n), Ga, z(d - n), label="lattice")


def follower_best_response(spec, steps, Gu, hu):
    """Exact best response of an unconstrained follower to ``u = Gu[k] x + hu[k]``.

    Dynamic programming for the Euler scheme: only the first two moments of
    the increments enter, so the value function stays quadratic.
    """
    if not spec.gamma2.is_full:
        raise ValueError("the dynamic-programming response needs an unconstrained follower")
    n, dt = spec.n, spec.T / steps
    P = spec.Phi2.copy()
    p = np.zeros(n)
    L = np.zeros((steps, spec.m2, n))
    l = np.zeros((steps, spec.m2))  # noqa: E741
    for k in range(steps - 1, -1, -1):
        c = spec.coeffs(k * dt)
        Acl = np.eye(n) + (c.A + c.B1 @ Gu[k]) * dt
        b = c.B1 @ hu[k] * dt
        Ccl = c.C + c.D1 @ Gu[k]
        dd = c.D1 @ hu[k]
        H = c.R2 + dt * c.B2.T @ P @ c.B2 + c.D2.T @ P @ c.D2
        L[k] = -np.linalg.solve(H, c.B2.T @ P @ Acl + c.D2.T @ P @ Ccl)
        l[k] = -np.linalg.solve(H, c.B2.T @ (P @ b + p) + c.D2.T @ P @ dd)
        M = Acl + c.B2 @ L[k] * dt
        mu = b + c.B2 @ l[k] * dt
        Sm = Ccl + c.D2 @ L[k]
        sg = dd + c.D2 @ l[k]
        P_new = c.Q2 * dt + L[k].T @ c.R2 @ L[k] * dt + M.T @ P @ M + dt * Sm.T @ P @ Sm
        p = L[k].T @ c.R2 @ l[k] * dt + M.T @ (P @ mu + p) + dt * Sm.T @ P @ sg
        P = 0.5 * (P_new + P_new.T)
    return L, l


def affine_leader_strategy(spec, steps, Gu, hu, label="affine-leader"):
    """Deterministic affine leader feedback with the follower's exact response."""
    Gu = np.asarray(Gu, dtype=float).reshape(steps, spec.m1, spec.n)
    hu = np.asarray(hu, dtype=float).reshape(steps, spec.m1)
    L, l = follower_best_response(spec, steps, Gu, hu)
    return AffineStrategy(spec.T, steps, spec.x0.copy(), Gu, hu, L, l, label=label)


def aclm_strategy(spec, sol, steps):
    """Closed-loop leader surrogate: layer expectations of gain and offset."""
    from .aclm import strategy_coefficients

    g, h = strategy_coefficients(sol)
    N = sol.lattice.N
    idx = [_layer_index(t, spec.T, N) for t in _step_times(spec.T, steps)]
    return affine_leader_strategy(spec, steps, g[idx], h[idx], label="aclm")


def constant_affine_strategy(spec, steps, u2, u1):
    return affine_leader_strategy(spec, steps, np.full(steps, float(u2)), np.full(steps, float(u1)),
                                  label="constant-affine")


class NodeLookupStrategy:
    """Lattice node controls off the lattice: layer by time, nearest node in state."""

    def __init__(self, x, u, v):
        self.x = x
        self.u = u
        self.v = v
        self.lattice = x.lattice

    @classmethod
    def from_solution(cls, sol):
        return cls(sol.x, sol.u, sol.v)

    def __call__(self, t, X):
        lat = self.lattice
        i = _layer_index(t, lat.T, lat.N)
        nodes = self.x[i]
        d2 = ((X[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=2)
        j = np.argmin(d2, axis=1)
        return self.u[i][j], self.v[i][j]


def exact_costs(spec, strat):
    """Expected Euler-scheme costs of an affine strategy, from the first two moments."""
    F, f, G, g = strat.closed_loop(spec)
    (W1, w1, c1), (W2, w2, c2), P1, P2 = strat.cost_weights(spec)
    dt = strat.T / strat.steps
    m = strat.X0.copy()
    S = np.outer(m, m)
    J = np.zeros(2)
    I = np.eye(m.size)  # noqa: E741
    for k in range(strat.steps):
        J[0] += (0.5 * np.trace(W1[k] @ S) + w1[k] @ m + c1[k]) * dt
        J[1] += (0.5 * np.trace(W2[k] @ S) + w2[k] @ m + c2[k]) * dt
        M = I + F[k] * dt
        fm = f[k] * dt
        Mm = M @ m
        S_new = M @ S @ M.T + np.outer(Mm, fm) + np.outer(fm, Mm) + np.outer(fm, fm)
        S_new += dt * (G[k] @ S @ G[k].T + np.outer(G[k] @ m, g[k]) + np.outer(g[k], G[k] @ m)
                       + np.outer(g[k], g[k]))
        m = Mm + fm
        S = 0.5 * (S_new + S_new.T)
    J[0] += 0.5 * np.trace(P1 @ S)
    J[1] += 0.5 * np.trace(P2 @ S)
    return float(J[0]), float(J[1])


# -- sampling -----------------------------------------------------------------

def _increments(cfg, block, count):
    gen = np.random.Generator(np.random.Philox(key=[cfg.seed & (2**64 - 1), block]))
    if cfg.antithetic:
        half = gen.standard_normal((count // 2, cfg.steps))
        Z = np.empty((count, cfg.steps))
        Z[0::2] = half
        Z[1::2] = -half
    else:
        Z = gen.standard_normal((count, cfg.steps))
    return Z


def _blocks(cfg):
    out = []
    start = 0
    b = 0
    while start < cfg.paths:
        cnt = min(cfg.block, cfg.paths - start)
        out.append((b, cnt))
        start += cnt
        b += 1
    return out


def _estimate(J, cfg, XT):
    if cfg.antithetic:
        J = 0.5 * (J[0::2] + J[1::2])
    cnt = J.shape[0]
    mean = J.mean(axis=0)
    se = J.std(axis=0, ddof=1) / np.sqrt(cnt) if cnt > 1 else np.zeros(2)
    return CostEstimate(float(mean[0]), float(se[0]), float(mean[1]), float(se[1]), cfg.paths, XT)


def _callable_block(spec, strategies, cfg, Z):
    T, S = spec.T, cfg.steps
    dt = T / S
    dW = Z * np.sqrt(dt)
    P = Z.shape[0]
    X = np.tile(spec.x0, (P, 1))
    J = np.zeros((P, 2))
    for k in range(S):
        t = k * dt
        c = spec.coeffs(t)
        u, v = strategies(t, X)
        u = np.broadcast_to(np.asarray(u, dtype=float).reshape(-1, spec.m1), (P, spec.m1))
        v = np.broadcast_to(np.asarray(v, dtype=float).reshape(-1, spec.m2), (P, spec.m2))
        J[:, 0] += 0.5 * dt * (np.einsum("pi,ij,pj->p", X, c.Q1, X) + np.einsum("pi,ij,pj->p", u, c.R1, u))
        J[:, 1] += 0.5 * dt * (np.einsum("pi,ij,pj->p", X, c.Q2, X) + np.einsum("pi,ij,pj->p", v, c.R2, v))
        drift = X @ c.A.T + u @ c.B1.T + v @ c.B2.T
        diff = X @ c.C.T + u @ c.D1.T + v @ c.D2.T
        X = X + drift * dt + diff * dW[:, k:k + 1]
    J[:, 0] += 0.5 * np.einsum("pi,ij,pj->p", X, spec.Phi1, X)
    J[:, 1] += 0.5 * np.einsum("pi,ij,pj->p", X, spec.Phi2, X)
    return J, X


def simulate_costs(spec, strategies, cfg):
    """Euler-Maruyama estimates of (J1, J2) under the given strategies.

    ``strategies`` is an ``AffineStrategy`` (compiled kernel) or a callable
    ``(t, X) -> (u, v)`` vectorized over paths.
    """
    affine = isinstance(strategies, AffineStrategy)
    if affine:
        if strategies.steps != cfg.steps:
            raise ValueError("strategy grid and simulation steps differ")
        F, f, G, g = strategies.closed_loop(spec)
        (W1, w1, c1), (W2, w2, c2), P1, P2 = strategies.cost_weights(spec)
    dt = spec.T / cfg.steps

    def run(item):
        b, cnt = item
        Z = _increments(cfg, b, cnt)
        if affine:
            return kernels.affine_paths(strategies.X0, F, f, G, g, W1, w1, c1, W2, w2, c2,
                                        P1, P2, Z * np.sqrt(dt), dt)
        return _callable_block(spec, strategies, cfg, Z)

    items = _blocks(cfg)
    workers = cfg.worker_count()
    if workers == 1 or len(items) == 1:
        results = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, items))
    J = np.concatenate([r[0] for r in results])
    XT = np.concatenate([r[1] for r in results])
    return _estimate(J, cfg, XT)


def grid_search_constant_affine(spec, K, steps, u2_grid=None, u1_grid=None, refine=True):
    """Best constant ``u = u2 x + u1`` (|u2| <= K) by exact expected cost of the Euler scheme.

    A coarse grid is followed by one finer grid around the coarse winner.
    """
    if u2_grid is None:
        u2_grid = np.linspace(-K, K, 11)
    if u1_grid is None:
        u1_grid = np.linspace(-2.0, 2.0, 21)

    def scan(g2, g1):
        best = None
        for u2 in g2:
            for u1 in g1:
                J1, _ = exact_costs(spec, constant_affine_strategy(spec, steps, u2, u1))
                if best is None or J1 < best[0]:
                    best = (J1, float(u2), float(u1))
        return best

    best = scan(u2_grid, u1_grid)
    evaluated = len(u2_grid) * len(u1_grid)
    if refine and len(u2_grid) > 1 and len(u1_grid) > 1:
        h2 = float(np.ptp(u2_grid)) / (len(u2_grid) - 1)
        h1 = float(np.ptp(u1_grid)) / (len(u1_grid) - 1)
        g2 = np.clip(best[1] + np.linspace(-h2, h2, 9), -K, K)
        g1 = best[2] + np.linspace(-h1, h1, 9)
        fine = scan(np.unique(g2), g1)
        evaluated += len(np.unique(g2)) * len(g1)
        if fine[0] < best[0]:
            best = fine
    return {"J1": best[0], "u2": best[1], "u1": best[2], "evaluated": evaluated}


# -- perturbation probes --------------------------------------------------------

@dataclass
class ProbeReport:
    role: str
    eps: float
    baseline: float
    deltas: np.ndarray
    stderr: np.ndarray
    tol: float = TOL_OPT

    @property
    def passed(self):
        return bool(np.all(self.deltas >= -(3.0 * self.stderr + self.tol)))

    @property
    def min_delta(self):
        return float(np.min(self.deltas)) if self.deltas.size else 0.0

    def to_dict(self):
        return {"role": self.role, "eps": self.eps, "baseline": self.baseline,
                "trials": int(self.deltas.size), "min_delta": self.min_delta, "passed": self.passed}


def _perturb(cset, metric_of, layers, rng, eps):
    from .projection import project

    out = []
    for i, a in enumerate(layers):
        d = rng.standard_normal(a.shape)
        out.append(project(cset, metric_of(i), a + eps * d) if eps != 0 else a.copy())
    return out


def perturbation_probe(spec, strategies, cfg, role, trials=64, eps=0.05):
    """Random admissible perturbations of one player's node controls.

    ``strategies`` is a full-tree solution.  Costs are the exact lattice
    expectations, so the reported standard errors are zero.  A leader
    perturbation re-solves the follower's response.
    """
    from .fbsde import solve_by_continuation, solve_follower, tree_costs, tree_states

    sol = strategies
    lat = sol.lattice
    rng = np.random.default_rng([cfg.seed, 0 if role == "follower" else 1])
    metric = lambda key: (lambda i: getattr(spec.coeffs(lat.time(i)), key))  # noqa: E731
    u, v = sol.u.layers, sol.v.layers
    base = tree_costs(spec, lat, sol.x.layers, u, v)
    deltas = []
    for _ in range(trials):
        if role == "follower":
            v_new = _perturb(spec.gamma2, metric("metric2"), v, rng, eps)
            x = tree_states(spec, lat, u, v_new)
            deltas.append(tree_costs(spec, lat, x, u, v_new)[1] - base[1])
        elif role == "leader":
            u_new = _perturb(spec.gamma1, metric("metric1"), u, rng, eps)
            if eps == 0:
                deltas.append(0.0)
                continue
            try:
                fs = solve_follower(spec, lat, u_new)
            except NotConverged:
                fs = solve_by_continuation(spec, lat, "follower", steps=8, leader_controls=u_new)
            deltas.append(tree_costs(spec, lat, fs.x.layers, u_new, fs.v.layers)[0] - base[0])
        else:
            raise ValueError("role must be 'leader' or 'follower'")
    deltas = np.asarray(deltas)
    return ProbeReport(role, float(eps), base[1] if role == "follower" else base[0],
                       deltas, np.zeros_like(deltas))
