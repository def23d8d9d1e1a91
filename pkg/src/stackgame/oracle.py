"""Brute-force Stackelberg solver on small full trees.

Nothing here touches the adjoint machinery.  Node controls are flattened in
(layer, index) order; the state at every node is an affine function of the
two control vectors, assembled column by column from forward runs, so both
discrete costs are explicit quadratics.  The follower problem is then a
strongly convex QP over a product of convex sets, and the leader problem is
searched by projected gradient with central differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NotConverged

FOLLOWER_MAX_N = 6
LEADER_MAX_N = 4
GRAD_TOL = 1e-10
FD_STEP = 1e-5


def node_count(N):
    """Number of non-terminal nodes of the full tree."""
    return (1 << N) - 1


def to_layers(vec, N, m):
    """Flattened node controls -> per-layer arrays ``(2**i, m)``."""
    vec = np.asarray(vec, dtype=float).reshape(-1, m)
    return [vec[(1 << i) - 1:(1 << (i + 1)) - 1].copy() for i in range(N)]


def from_layers(layers):
    return np.concatenate([np.asarray(a, dtype=float) for a in layers]).ravel()


class _TreeQuadratics:
    """``x = s0 + Su u + Sv v`` on all nodes and the two cost quadratics."""

    def __init__(self, spec, T, N):
        self.spec = spec
        self.N = N
        self.dt = T / N
        self.n, self.m1, self.m2 = spec.n, spec.m1, spec.m2
        self.nodes = (1 << (N + 1)) - 1
        self.inner = node_count(N)
        coef = [spec.coeffs(i * self.dt) for i in range(N)]
        self._coef = coef
        s0 = self._forward(np.zeros(self.inner * self.m1), np.zeros(self.inner * self.m2), spec.x0)
        zero_x = np.zeros(self.n)
        self.s0 = s0
        self.Su = np.column_stack([self._forward(e, np.zeros(self.inner * self.m2), zero_x)
                                   for e in np.eye(self.inner * self.m1)])
        self.Sv = np.column_stack([self._forward(np.zeros(self.inner * self.m1), e, zero_x)
                                   for e in np.eye(self.inner * self.m2)])
        # block weights: state weights per node, control weights per inner node
        WQ1 = np.zeros((self.nodes * self.n,) * 2)
        WQ2 = np.zeros_like(WQ1)
        WR1 = np.zeros((self.inner * self.m1,) * 2)
        WR2 = np.zeros((self.inner * self.m2,) * 2)
        for i in range(N + 1):
            prob = 0.5**i
            for j in range(1 << i):
                k = (1 << i) - 1 + j
                sx = slice(k * self.n, (k + 1) * self.n)
                if i < N:
                    c = coef[i]
                    WQ1[sx, sx] = self.dt * prob * c.Q1
                    WQ2[sx, sx] = self.dt * prob * c.Q2
                    WR1[k * self.m1:(k + 1) * self.m1, k * self.m1:(k + 1) * self.m1] = self.dt * prob * c.R1
                    WR2[k * self.m2:(k + 1) * self.m2, k * self.m2:(k + 1) * self.m2] = self.dt * prob * c.R2
                else:
                    WQ1[sx, sx] = prob * spec.Phi1
                    WQ2[sx, sx] = prob * spec.Phi2
        self.WQ1, self.WQ2, self.WR1, self.WR2 = WQ1, WQ2, WR1, WR2
        self.H2 = self.Sv.T @ WQ2 @ self.Sv + WR2
        self.H2 = 0.5 * (self.H2 + self.H2.T)
        # per-node scaling for the follower gradient (inverse node probability / dt)
        self.scale2 = np.repeat([1.0 / (self.dt * 0.5**i) for i in range(N) for _ in range(1 << i)],
                                self.m2)
        self.scale1 = np.repeat([1.0 / (self.dt * 0.5**i) for i in range(N) for _ in range(1 << i)],
                                self.m1)

    def _forward(self, u, v, x0):
        n, m1, m2 = self.n, self.m1, self.m2
        s = np.sqrt(self.dt)
        x = np.zeros((self.nodes, n))
        x[0] = x0
        for i in range(self.N):
            c = self._coef[i]
            for j in range(1 << i):
                k = (1 << i) - 1 + j
                uk, vk = u[k * m1:(k + 1) * m1], v[k * m2:(k + 1) * m2]
                drift = c.A @ x[k] + c.B1 @ uk + c.B2 @ vk
                diff = c.C @ x[k] + c.D1 @ uk + c.D2 @ vk
                base = x[k] + drift * self.dt
                down = (1 << (i + 1)) - 1 + 2 * j
                x[down] = base - diff * s
                x[down + 1] = base + diff * s
        return x.ravel()

    def states(self, u, v):
        return self.s0 + self.Su @ u + self.Sv @ v

    def J1(self, u, v):
        x = self.states(u, v)
        return float(0.5 * (x @ self.WQ1 @ x + u @ self.WR1 @ u))

    def J2(self, u, v):
        x = self.states(u, v)
        return float(0.5 * (x @ self.WQ2 @ x + v @ self.WR2 @ v))

    def follower_linear(self, u):
        r = self.s0 + self.Su @ u
        return self.Sv.T @ self.WQ2 @ r


def _project_nodes(cset, Z):
    return cset.euclidean(Z)


@dataclass
class FollowerResult:
    v: np.ndarray
    J2: float
    iterations: int
    grad_map: float
    polished: bool

    def __iter__(self):
        return iter((self.v, self.J2))


def _gradient_map(H, g, proj, scale, v):
    grad = H @ v + g
    return np.max(np.abs(v - proj(v - scale * grad)), initial=0.0)


def _polish_box(cset, H, g, v, m, scale):
    """Exact solve on the active face of a box (identifies clamps from the iterate)."""
    lo = np.tile(np.broadcast_to(cset.lower, (m,)), len(v) // m)
    hi = np.tile(np.broadcast_to(cset.upper, (m,)), len(v) // m)
    grad = H @ v + g
    tol = 1e-9
    at_lo = (v <= lo + tol) & (grad > 0)
    at_hi = (v >= hi - tol) & (grad < 0)
    fixed = at_lo | at_hi
    w = v.copy()
    w[at_lo] = lo[at_lo]
    w[at_hi] = hi[at_hi]
    free = ~fixed
    if free.any():
        rhs = -(g[free] + H[np.ix_(free, fixed)] @ w[fixed])
        w[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
    if np.any(w < lo - 1e-13) or np.any(w > hi + 1e-13):
        return None
    return w


def _solve_qp(cset, H, g, m, scale, v0=None, tol=GRAD_TOL, max_iter=10**6):
    """Projected gradient with Armijo backtracking, then active-face polish."""
    proj = lambda z: _project_nodes(cset, z.reshape(-1, m)).ravel()  # noqa: E731
    obj = lambda z: 0.5 * z @ H @ z + g @ z  # noqa: E731
    v = proj(np.zeros_like(g) if v0 is None else np.asarray(v0, dtype=float))
    f = obj(v)
    # normalize the step so that the scaled Hessian has unit spectral radius
    Hs = np.sqrt(scale)[:, None] * H * np.sqrt(scale)[None, :]
    L = float(np.max(np.linalg.eigvalsh(0.5 * (Hs + Hs.T))))
    step = 1.0 / L
    it = 0
    gm = np.inf
    while it < max_iter:
        it += 1
        grad = H @ v + g
        gm = float(np.max(np.abs(v - proj(v - scale * grad)), initial=0.0))
        if gm <= tol:
            break
        t = min(2.0 * step, 1.0 / L * 4.0)
        while True:
            w = proj(v - t * scale * grad)
            fw = obj(w)
            if fw <= f + grad @ (w - v) + 0.5 / t * np.sum((w - v) ** 2 / scale) or t < 1e-16:
                break
            t *= 0.5
        step = t
        v, f = w, fw
        if it % 50 == 0:
            cand = _try_polish(cset, H, g, v, m, scale, proj, obj)
            if cand is not None:
                return cand, it, True
    else:
        raise NotConverged(f"follower QP gradient map {gm:.3e} after {max_iter} iterations", [gm])
    cand = _try_polish(cset, H, g, v, m, scale, proj, obj)
    if cand is not None:
        return cand, it, True
    return v, it, False


def _try_polish(cset, H, g, v, m, scale, proj, obj):
    from .projection import Box

    if cset.is_full:
        w = np.linalg.solve(H, -g)
    elif isinstance(cset, Box):
        w = _polish_box(cset, H, g, v, m, scale)
        if w is None:
            return None
    else:
        return None
    grad = H @ w + g
    if np.max(np.abs(w - proj(w - scale * grad)), initial=0.0) <= GRAD_TOL and obj(w) <= obj(v) + 1e-14:
        return w
    return None


def _follower_on(tq, spec, u, v0=None):
    g = tq.follower_linear(u)
    v, it, pol = _solve_qp(spec.gamma2, tq.H2, g, spec.m2, tq.scale2, v0)
    grad = tq.H2 @ v + g
    gm = float(np.max(np.abs(v - _project_nodes(spec.gamma2, (v - tq.scale2 * grad).reshape(-1, spec.m2)).ravel())))
    return FollowerResult(v, tq.J2(u, v), it, gm, pol)


def oracle_follower(spec, lattice, leader_controls):
    """Follower best response as a TreeControlVector plus its discrete cost."""
    N = lattice.N
    if N > FOLLOWER_MAX_N:
        raise ValueError(f"oracle follower is limited to N <= {FOLLOWER_MAX_N}")
    tq = _TreeQuadratics(spec, lattice.T, N)
    u = _as_vector(leader_controls, spec.m1)
    return _follower_on(tq, spec, u)


def _as_vector(ctrl, m):
    if hasattr(ctrl, "layers"):
        return from_layers(ctrl.layers)
    if isinstance(ctrl, (list, tuple)):
        return from_layers(ctrl)
    return np.asarray(ctrl, dtype=float).ravel()


@dataclass
class LeaderResult:
    u: np.ndarray
    v: np.ndarray
    J1: float
    J2: float
    restarts: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.u, self.v, self.J1))

    def to_dict(self):
        return {"J1": self.J1, "J2": self.J2, "u": self.u.tolist(), "v": self.v.tolist(),
                "restarts": self.restarts}


def _leader_descent(tq, spec, u0, max_iter=400, tol=1e-9):
    m1 = spec.m1
    proj = lambda z: _project_nodes(spec.gamma1, z.reshape(-1, m1)).ravel()  # noqa: E731
    cache = {}

    def J(u):
        key = u.tobytes()
        hit = cache.get(key)
        if hit is None:
            fr = _follower_on(tq, spec, u)
            hit = (tq.J1(u, fr.v), fr)
            cache[key] = hit
        return hit

    def grad(u):
        gr = np.zeros_like(u)
        for k in range(len(u)):
            e = np.zeros_like(u)
            e[k] = FD_STEP
            gr[k] = (J(u + e)[0] - J(u - e)[0]) / (2 * FD_STEP)
        return gr

    u = proj(np.asarray(u0, dtype=float))
    f = J(u)[0]
    t = 1.0
    gm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        gr = grad(u)
        gm = float(np.max(np.abs(u - proj(u - tq.scale1 * gr)), initial=0.0))
        if gm <= tol:
            break
        t = min(4.0 * t, 1.0)
        while True:
            w = proj(u - t * tq.scale1 * gr)
            fw = J(w)[0]
            if fw <= f - 1e-4 / t * np.sum((w - u) ** 2 / tq.scale1) or t < 1e-12:
                break
            t *= 0.5
        if fw > f:
            break
        u, f = w, fw
    fr = J(u)[1]
    return u, fr, f, it, gm


def oracle_leader(spec, lattice, outer="projected_gradient", restarts=4, seed=0, starts=None,
                  include_max_principle=True):
    """Leader problem with the follower best response embedded, by multi-start descent."""
    if outer not in ("projected_gradient", "fd"):
        raise ValueError("only the finite-difference projected gradient outer loop is available")
    N = lattice.N
    if N > LEADER_MAX_N:
        raise ValueError(f"oracle leader is limited to N <= {LEADER_MAX_N}")
    if restarts < 4:
        raise ValueError("at least 4 restarts are required")
    tq = _TreeQuadratics(spec, lattice.T, N)
    rng = np.random.default_rng(seed)
    init = []
    if include_max_principle:
        from .fbsde import solve_by_continuation
        try:
            mp = solve_by_continuation(spec, lattice, "leader", steps=4)
            init.append(("max_principle", from_layers(mp.u.layers)))
        except Exception as exc:  # best effort: the oracle must not depend on it
            init.append(("max_principle_failed", None))
            _ = exc
    for s in starts or []:
        init.append(("given", _as_vector(s, spec.m1)))
    for r in range(restarts):
        init.append((f"random{r}", spec.gamma1.sample(rng, tq.inner).ravel()))
    best = None
    report = []
    for label, u0 in init:
        if u0 is None:
            report.append({"start": label, "J1": None})
            continue
        u, fr, f, it, gm = _leader_descent(tq, spec, u0)
        report.append({"start": label, "J1": float(f), "iterations": it, "grad_map": gm})
        if best is None or f < best[2] - 1e-15:
            best = (u, fr.v, float(f))
    u, v, f = best
    return LeaderResult(u, v, f, tq.J2(u, v), report)


def clamped_nodes(cset, vec, m, tol=1e-9):
    """Indices of nodes whose control touches the boundary of ``cset``."""
    Z = np.asarray(vec, dtype=float).reshape(-1, m)
    if cset.is_full:
        return set()
    from .projection import Box

    if isinstance(cset, Box):
        hit = np.any((Z <= cset.lower + tol) | (Z >= cset.upper - tol), axis=1)
        return set(np.flatnonzero(hit).tolist())
    from .projection import EuclideanBall, Halfspace

    if isinstance(cset, EuclideanBall):
        hit = np.abs(np.linalg.norm(Z - cset.center, axis=1) - cset.radius) <= tol
    elif isinstance(cset, Halfspace):
        hit = np.abs(Z @ cset.a - cset.b) <= tol
    else:
        raise ValueError(f"no boundary test for {type(cset).__name__}")
    return set(np.flatnonzero(hit).tolist())
