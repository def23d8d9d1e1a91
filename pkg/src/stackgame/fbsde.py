"""Projection-coupled forward-backward systems on the binomial tree.

Discretization (full tree, ``ξ = ±√dt``)::

    x(i+1) = x(i) + (A x + B1 u + B2 v) dt + (C x + D1 u + D2 v) ξ
    p̄(i)   = E_i[p(i+1)],   q(i) = E_i[p(i+1) ξ] / dt
    p2(i)  = p̄2 + (Aᵀp̄2 + Cᵀq2 + Q2 x) dt,        p2(N) = Φ2 x(N)
    p1(i)  = p̄1 + (Aᵀp̄1 + Cᵀq1 + Q1 x − Q2 k) dt, p1(N) = Φ1 x(N) − Φ2 k(N)
    k(i+1) = k + (A k + B2 R2⁻¹ Jᵀ w) dt + (C k + D2 R2⁻¹ Jᵀ w) ξ,  k(0) = 0

with ``v = φ2(p̄2, q2)``, ``u = φ1(p̄1, q1)``, ``w = B2ᵀp̄1 + D2ᵀq1`` and J the
B-derivative of the follower projection.  Evaluating the controls at the
conditional mean ``p̄`` rather than at ``p(i)`` makes these equations the
exact first-order conditions of the discrete game on the tree, which is
what the brute-force oracle solves.

Three solvers share the same system description:

* ``solve_follower`` / ``solve_leader_system``: Picard iteration on the
  adjoint, with exact forward and backward sweeps per iterate;
* ``solve_by_continuation``: the homotopy in α, where every level is
  iterated through the map that treats the α₀ part implicitly;
* ``linear_lattice_solution``: per-layer gains for full-space sets, which
  are node independent and therefore reach N far beyond the full tree.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NotConverged, SingularMatrix
from .lattice import Lattice, NodeProcess
from .projection import Box, projection_jacobian, project

TOL_FIX = 1e-10
MAX_ITER = 500
COND_GUARD = 1e12
CLAMP_FLAG = 0.10


def _mv(M, X):
    """Row-batched ``M @ x`` for ``X`` of shape (S, k) and ``M`` (k', k) or (S, k', k)."""
    if M.ndim == 2:
        return X @ M.T
    return np.einsum("sij,sj->si", M, X)


def _jacobian_batch(cset, metric, pre, z):
    S, m = pre.shape
    if cset.is_full:
        return np.broadcast_to(np.eye(m), (S, m, m)), np.zeros(S, bool)
    if isinstance(cset, Box) and metric.is_diagonal:
        clamped = (pre < cset.lower) | (pre > cset.upper)
        J = np.zeros((S, m, m))
        idx = np.arange(m)
        J[:, idx, idx] = (~clamped).astype(float)
        return J, clamped.any(axis=1)
    J = np.stack([projection_jacobian(cset, metric, pre[s], z[s]) for s in range(S)])
    moved = np.max(np.abs(pre - z), axis=1) > 0
    return J, moved


@dataclass
class _Controls:
    u: np.ndarray
    v: np.ndarray
    Ju: np.ndarray
    Jv: np.ndarray
    clamped_u: np.ndarray
    clamped_v: np.ndarray


class _TreeSystem:
    """Coefficients and pieces of the leader or follower system per layer."""

    def __init__(self, spec, lattice, kind, leader_controls=None):
        if kind not in ("leader", "follower"):
            raise ValueError("system must be 'leader' or 'follower'")
        self.spec = spec
        self.lattice = lattice
        self.kind = kind
        n = spec.n
        self.n = n
        self.a = self.b = n if kind == "follower" else 2 * n
        self.c = [spec.coeffs(lattice.time(i)) for i in range(lattice.N)]
        if kind == "follower":
            if leader_controls is None:
                raise ValueError("follower system needs leader controls")
            self.u_fixed = [np.asarray(leader_controls[i], dtype=float).reshape(-1, spec.m1)
                            for i in range(lattice.N)]
            self.Phi = spec.Phi2.copy()
            self.X0 = spec.x0.copy()
        else:
            self.u_fixed = None
            z = np.zeros((n, n))
            self.Phi = np.block([[spec.Phi1, -spec.Phi2], [spec.Phi2, z]])
            self.X0 = np.concatenate([spec.x0, np.zeros(n)])
        self._lin_cache = {}

    # -- pieces -----------------------------------------------------------
    def controls(self, i, Z):
        c, n, b = self.c[i], self.n, self.b
        S = Z.shape[0]
        spec = self.spec
        if self.kind == "follower":
            pbar2, q2 = Z[:, :n], Z[:, n:]
            u = np.broadcast_to(self.u_fixed[i], (S, spec.m1)) if self.u_fixed[i].shape[0] == 1 \
                else self.u_fixed[i]
            Ju = np.zeros((S, spec.m1, spec.m1))
            cu = np.zeros(S, bool)
        else:
            pbar1, pbar2 = Z[:, :n], Z[:, n:b]
            q1, q2 = Z[:, b:b + n], Z[:, b + n:]
            pre_u = -(pbar1 @ c.B1 + q1 @ c.D1) @ c.R1inv
            u = project(spec.gamma1, c.metric1, pre_u)
            Ju, cu = _jacobian_batch(spec.gamma1, c.metric1, pre_u, u)
        pre_v = -(pbar2 @ c.B2 + q2 @ c.D2) @ c.R2inv
        v = project(spec.gamma2, c.metric2, pre_v)
        Jv, cv = _jacobian_batch(spec.gamma2, c.metric2, pre_v, v)
        return _Controls(u, v, Ju, Jv, cu, cv)

    def fixed_sources(self, i, S):
        if self.kind == "follower":
            c = self.c[i]
            u = self.u_fixed[i]
            psi = np.broadcast_to(u @ c.B1.T, (S, self.a))
            phi = np.broadcast_to(u @ c.D1.T, (S, self.a))
            return psi, phi
        return 0.0, 0.0

    def drift_diffusion(self, i, X, Z, ctl):
        """Coupled part of the forward coefficients (fixed sources excluded)."""
        c, n = self.c[i], self.n
        if self.kind == "follower":
            return X @ c.A.T + ctl.v @ c.B2.T, X @ c.C.T + ctl.v @ c.D2.T
        x, k = X[:, :n], X[:, n:]
        b = self.b
        w = Z[:, :n] @ c.B2 + Z[:, b:b + n] @ c.D2
        Jw = np.einsum("sji,sj->si", ctl.Jv, w) @ c.R2inv
        Fx = x @ c.A.T + ctl.u @ c.B1.T + ctl.v @ c.B2.T
        Gx = x @ c.C.T + ctl.u @ c.D1.T + ctl.v @ c.D2.T
        Fk = k @ c.A.T + Jw @ c.B2.T
        Gk = k @ c.C.T + Jw @ c.D2.T
        return np.hstack([Fx, Fk]), np.hstack([Gx, Gk])

    def driver_matrices(self, i):
        c, n = self.c[i], self.n
        if self.kind == "follower":
            return c.Q2, np.hstack([c.A.T, c.C.T])
        z = np.zeros((n, n))
        HX = np.block([[c.Q1, -c.Q2], [c.Q2, z]])
        HZ = np.block([[c.A.T, z, c.C.T, z], [z, c.A.T, z, c.C.T]])
        return HX, HZ

    def driver(self, i, X, Z):
        HX, HZ = self.driver_matrices(i)
        return X @ HX.T + Z @ HZ.T

    def linear_pieces(self, i, Z0, ctl):
        """Affine model ``F = FX X + FZ Z + f0`` (and G likewise) around ``Z0``."""
        c, n, a, b = self.c[i], self.n, self.a, self.b
        S = Z0.shape[0]
        if self.kind == "follower":
            FX, GX = c.A, c.C
            Dv = np.zeros((S, self.spec.m2, 2 * b))
            Dv[:, :, :n] = np.einsum("sij,jk->sik", ctl.Jv, -c.R2inv @ c.B2.T)
            Dv[:, :, n:] = np.einsum("sij,jk->sik", ctl.Jv, -c.R2inv @ c.D2.T)
            v_off = ctl.v - np.einsum("sij,sj->si", Dv, Z0)
            FZ = np.einsum("ij,sjk->sik", c.B2, Dv)
            GZ = np.einsum("ij,sjk->sik", c.D2, Dv)
            return FX, FZ, v_off @ c.B2.T, GX, GZ, v_off @ c.D2.T
        z = np.zeros((n, n))
        FX = np.block([[c.A, z], [z, c.A]])
        GX = np.block([[c.C, z], [z, c.C]])
        m1, m2 = self.spec.m1, self.spec.m2
        Du = np.zeros((S, m1, 2 * b))
        Du[:, :, :n] = np.einsum("sij,jk->sik", ctl.Ju, -c.R1inv @ c.B1.T)
        Du[:, :, b:b + n] = np.einsum("sij,jk->sik", ctl.Ju, -c.R1inv @ c.D1.T)
        Dv = np.zeros((S, m2, 2 * b))
        Dv[:, :, n:b] = np.einsum("sij,jk->sik", ctl.Jv, -c.R2inv @ c.B2.T)
        Dv[:, :, b + n:] = np.einsum("sij,jk->sik", ctl.Jv, -c.R2inv @ c.D2.T)
        Dw = np.zeros((m2, 2 * b))
        Dw[:, :n] = c.B2.T
        Dw[:, b:b + n] = c.D2.T
        RJt = np.einsum("ij,skj->sik", c.R2inv, ctl.Jv)  # R2⁻¹ Jᵀ
        u_off = ctl.u - np.einsum("sij,sj->si", Du, Z0)
        v_off = ctl.v - np.einsum("sij,sj->si", Dv, Z0)
        FZ = np.zeros((S, a, 2 * b))
        GZ = np.zeros((S, a, 2 * b))
        FZ[:, :n] = np.einsum("ij,sjk->sik", c.B1, Du) + np.einsum("ij,sjk->sik", c.B2, Dv)
        GZ[:, :n] = np.einsum("ij,sjk->sik", c.D1, Du) + np.einsum("ij,sjk->sik", c.D2, Dv)
        FZ[:, n:] = np.einsum("ij,sjk,kl->sil", c.B2, RJt, Dw)
        GZ[:, n:] = np.einsum("ij,sjk,kl->sil", c.D2, RJt, Dw)
        f0 = np.zeros((S, a))
        g0 = np.zeros((S, a))
        f0[:, :n] = u_off @ c.B1.T + v_off @ c.B2.T
        g0[:, :n] = u_off @ c.D1.T + v_off @ c.D2.T
        return FX, FZ, f0, GX, GZ, g0

    def split(self, Z):
        b = self.b
        return Z[:, :b], Z[:, b:]


# -- sweeps --------------------------------------------------------------

def _z_from_next(lattice, P_next):
    return np.hstack([lattice.expectation_step(P_next), lattice.integrand_step(P_next)])


def _forward(system, P):
    """States given the adjoint iterate; controls use (p̄, q) from ``P``."""
    lat = system.lattice
    X = [system.X0[None, :].copy()]
    Zs, ctls = [], []
    for i in range(lat.N):
        Z = _z_from_next(lat, P[i + 1])
        ctl = system.controls(i, Z)
        F, G = system.drift_diffusion(i, X[i], Z, ctl)
        psi, phi = system.fixed_sources(i, X[i].shape[0])
        F = F + psi
        G = G + phi
        X.append(lat.expand(X[i] + F * lat.dt) + lat.expand(G) * lat.xi(i + 1)[:, None])
        Zs.append(Z)
        ctls.append(ctl)
    return X, Zs, ctls


def _backward(system, X):
    lat = system.lattice
    P = [None] * (lat.N + 1)
    P[lat.N] = X[lat.N] @ system.Phi.T
    Zs = [None] * lat.N
    for i in range(lat.N - 1, -1, -1):
        Z = _z_from_next(lat, P[i + 1])
        P[i] = Z[:, :system.b] + system.driver(i, X[i], Z) * lat.dt
        Zs[i] = Z
    return P, Zs


def _ratio(history):
    h = [r for r in history if r > 0]
    if len(h) < 3:
        return 0.0
    tail = h[-min(len(h), 12):]
    # the first couple of iterations are transient, the last may sit at round-off
    if len(tail) > 4:
        tail = tail[1:-1]
    ratios = np.array(tail[1:]) / np.array(tail[:-1])
    return float(np.exp(np.mean(np.log(ratios))))


def _stalled(history, window=40):
    if not np.isfinite(history[-1]) or history[-1] > 1e12:
        return True
    if len(history) > window:
        return min(history[-window:]) >= min(history[:-window])
    return False


def _picard(system, tol, max_iter, P_init=None):
    lat = system.lattice
    if P_init is None:
        P = [np.zeros((lat.size(i), system.b)) for i in range(lat.N + 1)]
    else:
        P = [np.array(p, dtype=float) for p in P_init]
    history = []
    for it in range(1, max_iter + 1):
        X, _, ctls = _forward(system, P)
        P_new, Zs = _backward(system, X)
        res = max(float(np.max(np.abs(a - b))) for a, b in zip(P_new, P))
        history.append(res)
        P = P_new
        if res <= tol:
            return X, P, Zs, ctls, it, history
        if _stalled(history):
            break
    raise NotConverged(
        f"Picard iteration stalled at residual {history[-1]:.3e} after {len(history)} iterations",
        history)


# -- solutions -------------------------------------------------------------

@dataclass
class FollowerSystemSolution:
    lattice: Lattice
    x: NodeProcess
    p2: NodeProcess
    p2bar: NodeProcess
    q2: NodeProcess
    u: NodeProcess
    v: NodeProcess
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    contraction: float = 0.0
    clamped_fraction: float = 0.0

    @property
    def k(self):
        return None


@dataclass
class LeaderSystemSolution:
    lattice: Lattice
    x: NodeProcess
    k: NodeProcess
    p1: NodeProcess
    p2: NodeProcess
    p1bar: NodeProcess
    p2bar: NodeProcess
    q1: NodeProcess
    q2: NodeProcess
    u: NodeProcess
    v: NodeProcess
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    contraction: float = 0.0
    clamped_fraction: float = 0.0
    method: str = "picard"
    level_ratios: list = field(default_factory=list)

    @property
    def clamp_warning(self):
        return self.clamped_fraction > CLAMP_FLAG


def _clamped_fraction(lattice, ctls, which):
    total = sum(lattice.size(i) for i in range(lattice.N))
    hits = 0
    for c in ctls:
        mask = np.zeros(c.u.shape[0], bool)
        if "u" in which:
            mask |= c.clamped_u
        if "v" in which:
            mask |= c.clamped_v
        hits += int(mask.sum())
    return hits / total


def _package(system, X, P, Zs, ctls, iterations, history, method="picard", level_ratios=None):
    lat, n, b = system.lattice, system.n, system.b
    proc = lambda arrs: NodeProcess(lat, [np.ascontiguousarray(a) for a in arrs])  # noqa: E731
    u = proc([np.array(np.broadcast_to(c.u, (c.v.shape[0], system.spec.m1))) for c in ctls])
    v = proc([np.array(c.v) for c in ctls])
    residual = history[-1] if history else 0.0
    ratio = _ratio(history)
    if system.kind == "follower":
        return FollowerSystemSolution(
            lat, proc(X), proc(P), proc([Z[:, :n] for Z in Zs]), proc([Z[:, n:] for Z in Zs]),
            u, v, iterations, residual, history, ratio, _clamped_fraction(lat, ctls, "v"))
    return LeaderSystemSolution(
        lat, proc([x[:, :n] for x in X]), proc([x[:, n:] for x in X]),
        proc([p[:, :n] for p in P]), proc([p[:, n:] for p in P]),
        proc([Z[:, :n] for Z in Zs]), proc([Z[:, n:b] for Z in Zs]),
        proc([Z[:, b:b + n] for Z in Zs]), proc([Z[:, b + n:] for Z in Zs]),
        u, v, iterations, residual, history, ratio, _clamped_fraction(lat, ctls, "uv"),
        method, list(level_ratios or []))


def _check_full_tree(lattice):
    if lattice.recombining:
        raise ValueError("controls are path dependent; use a full (non-recombining) lattice")


def solve_follower(spec, lattice, leader_controls, tol=TOL_FIX, max_iter=MAX_ITER):
    """Follower adjoint system for given node controls of the leader.

    ``leader_controls`` is a NodeProcess (or list of per-layer arrays) with
    ``N`` layers of shape ``(2**i, m1)``.
    """
    _check_full_tree(lattice)
    layers = leader_controls.layers if isinstance(leader_controls, NodeProcess) else leader_controls
    system = _TreeSystem(spec, lattice, "follower", layers)
    X, P, Zs, ctls, it, hist = _picard(system, tol, max_iter)
    return _package(system, X, P, Zs, ctls, it, hist)


def solve_leader_system(spec, lattice, tol=TOL_FIX, max_iter=MAX_ITER):
    """Coupled (x, k, p1, q1, p2, q2) system with both projections substituted."""
    _check_full_tree(lattice)
    system = _TreeSystem(spec, lattice, "leader")
    X, P, Zs, ctls, it, hist = _picard(system, tol, max_iter)
    return _package(system, X, P, Zs, ctls, it, hist)


def picard_residual(system, P):
    """Sup distance between ``P`` and one Picard update of it."""
    X, _, _ = _forward(system, P)
    P_new, _ = _backward(system, X)
    return max(float(np.max(np.abs(a - b))) for a, b in zip(P_new, P))


# -- decoupling sweep --------------------------------------------------------

def _node_solve(lat, Mc, mc, FX, FZ, d0, GX, GZ, g0, alpha, b):
    """Solve for ``Z = SX X + s0`` at every node of one layer.

    ``Mc``/``mc`` are ``(down, up)`` pairs of successor decoupling fields.
    """
    dt, s = lat.dt, lat.sqdt
    (Md, Mu), (md, mu) = Mc, mc
    Mbar, Mtil = 0.5 * (Mu + Md), 0.5 * (Mu - Md)
    mbar, mhat = 0.5 * (mu + md), (mu - md) / (2.0 * s)
    DX, DZ = alpha * FX, alpha * FZ
    GXa, GZa = alpha * GX, alpha * GZ
    S = Mbar.shape[0]
    a = Mbar.shape[2]
    mm = lambda A, B: np.einsum("sij,...jk->sik", A, B) if B.ndim == 2 else np.einsum("sij,sjk->sik", A, B)  # noqa: E731
    LpX = Mbar + dt * mm(Mbar, DX) + s * mm(Mtil, GXa)
    LpZ = dt * mm(Mbar, DZ) + s * mm(Mtil, GZa)
    lp = dt * np.einsum("sij,sj->si", Mbar, d0) + s * np.einsum("sij,sj->si", Mtil, g0) + mbar
    LqX = Mtil / s + s * mm(Mtil, DX) + mm(Mbar, GXa)
    LqZ = s * mm(Mtil, DZ) + mm(Mbar, GZa)
    lq = s * np.einsum("sij,sj->si", Mtil, d0) + np.einsum("sij,sj->si", Mbar, g0) + mhat
    K = np.eye(2 * b)[None] - np.concatenate([LpZ, LqZ], axis=1)
    rhs = np.concatenate([np.concatenate([LpX, LqX], axis=1),
                          np.concatenate([lp, lq], axis=1)[:, :, None]], axis=2)
    cond = np.linalg.cond(K)
    if np.any(~np.isfinite(cond)) or np.max(cond) > COND_GUARD:
        raise SingularMatrix(f"node system condition number {np.max(cond):.3e}")
    sol = np.linalg.solve(K, rhs)
    return sol[:, :, :a], sol[:, :, a]


def _decoupled_solve(system, alpha, sources, Z_guess=None, max_newton=100):
    """Exact solve of the α-scaled system with frozen sources on the full tree.

    ``sources`` holds per-layer ``psi``, ``phi``, ``zeta`` and terminal ``eta``.
    Projections are linearized at the current iterate and the linear system
    is solved by a backward decoupling sweep ``P = M X + m``; the iteration
    stops once the active pattern (and therefore the linearization) settles.
    """
    lat, a, b = system.lattice, system.a, system.b
    N = lat.N
    psi, phi, zeta, eta = sources
    if Z_guess is None:
        Z = [np.zeros((lat.size(i), 2 * b)) for i in range(N)]
    else:
        Z = [z.copy() for z in Z_guess]
    HX, HZ = None, None
    for it in range(max_newton):
        ctls = [system.controls(i, Z[i]) for i in range(N)]
        pieces = [system.linear_pieces(i, Z[i], ctls[i]) for i in range(N)]
        M = [None] * (N + 1)
        m = [None] * (N + 1)
        M[N] = np.broadcast_to(alpha * system.Phi, (lat.size(N), b, a))
        m[N] = eta
        SX, s0 = [None] * N, [None] * N
        for i in range(N - 1, -1, -1):
            FX, FZ, f0, GX, GZ, g0 = pieces[i]
            d0 = alpha * f0 + psi[i]
            gg0 = alpha * g0 + phi[i]
            SX[i], s0[i] = _node_solve(lat, lat.down_up(M[i + 1]), lat.down_up(m[i + 1]),
                                       FX, FZ, d0, GX, GZ, gg0, alpha, b)
            HX, HZ = system.driver_matrices(i)
            M[i] = SX[i][:, :b] + lat.dt * alpha * (HX[None] + np.einsum("ij,sjk->sik", HZ, SX[i]))
            m[i] = s0[i][:, :b] + lat.dt * (alpha * s0[i] @ HZ.T + zeta[i])
        X = [system.X0[None, :].copy()]
        Z_new = []
        for i in range(N):
            FX, FZ, f0, GX, GZ, g0 = pieces[i]
            Zi = np.einsum("sij,sj->si", SX[i], X[i]) + s0[i]
            d = alpha * (_mv(FX, X[i]) + np.einsum("sij,sj->si", FZ, Zi) + f0) + psi[i]
            g = alpha * (_mv(GX, X[i]) + np.einsum("sij,sj->si", GZ, Zi) + g0) + phi[i]
            X.append(lat.expand(X[i] + d * lat.dt) + lat.expand(g) * lat.xi(i + 1)[:, None])
            Z_new.append(Zi)
        P = [np.einsum("sij,sj->si", M[i], X[i]) + m[i] for i in range(N + 1)]
        change = max(float(np.max(np.abs(z1 - z0))) for z1, z0 in zip(Z_new, Z))
        scale = 1.0 + max(float(np.max(np.abs(z))) for z in Z_new)
        Z = Z_new
        if alpha == 0.0 or change <= 1e-14 * scale:
            return X, P, Z, it + 1
    raise NotConverged("active-set iteration of the decoupled solve did not settle", alpha=alpha)


def _zero_sources(system):
    lat = system.lattice
    psi = [np.zeros((lat.size(i), system.a)) for i in range(lat.N)]
    phi = [np.zeros((lat.size(i), system.a)) for i in range(lat.N)]
    zeta = [np.zeros((lat.size(i), system.b)) for i in range(lat.N)]
    eta = np.zeros((lat.size(lat.N), system.b))
    for i in range(lat.N):
        p, f = system.fixed_sources(i, lat.size(i))
        psi[i] = psi[i] + p
        phi[i] = phi[i] + f
    return psi, phi, zeta, eta


def solve_by_continuation(spec, lattice, system="leader", steps=8, leader_controls=None,
                          tol=TOL_FIX, max_iter=MAX_ITER):
    """Homotopy from the decoupled system (α = 0) to the target (α = 1).

    Level α₀ + δ is reached by iterating ``Y ↦ I_{α₀}(Y)``: the α₀ part of the
    system acts on the new iterate and the δ part on the previous one.  Each
    application is an exact decoupled solve.  ``steps = 1`` is plain Picard
    in its Jacobi form.
    """
    _check_full_tree(lattice)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    layers = None
    if system == "follower":
        if leader_controls is None:
            raise ValueError("follower continuation needs leader controls")
        layers = leader_controls.layers if isinstance(leader_controls, NodeProcess) else leader_controls
    sysobj = _TreeSystem(spec, lattice, system, layers)
    lat, N = lattice, lattice.N
    base = _zero_sources(sysobj)
    X, P, Z, _ = _decoupled_solve(sysobj, 0.0, base)
    delta = 1.0 / steps
    # levels are solved a decade tighter so the final plain-map defect stays below tol
    inner_tol = 0.1 * tol
    total_iter = 0
    level_ratios = []
    history = []
    for k in range(steps):
        alpha0 = k * delta
        level_hist = []
        for it in range(1, max_iter + 1):
            ctls = [sysobj.controls(i, Z[i]) for i in range(N)]
            psi, phi, zeta = [], [], []
            for i in range(N):
                F, G = sysobj.drift_diffusion(i, X[i], Z[i], ctls[i])
                psi.append(base[0][i] + delta * F)
                phi.append(base[1][i] + delta * G)
                zeta.append(delta * sysobj.driver(i, X[i], Z[i]))
            eta = delta * X[N] @ sysobj.Phi.T
            X_new, P_new, Z_new, _ = _decoupled_solve(sysobj, alpha0, (psi, phi, zeta, eta), Z)
            res = max(max(float(np.max(np.abs(a - b))) for a, b in zip(P_new, P)),
                      max(float(np.max(np.abs(a - b))) for a, b in zip(X_new, X)))
            level_hist.append(res)
            X, P, Z = X_new, P_new, Z_new
            if res <= inner_tol:
                break
            if _stalled(level_hist):
                raise NotConverged(
                    f"continuation stalled at alpha = {alpha0 + delta:.4g} (residual {res:.3e})",
                    history + level_hist, alpha=alpha0 + delta)
        else:
            raise NotConverged(
                f"continuation hit the iteration cap at alpha = {alpha0 + delta:.4g}",
                history + level_hist, alpha=alpha0 + delta)
        total_iter += len(level_hist)
        history.extend(level_hist)
        level_ratios.append(_ratio(level_hist) if len(level_hist) >= 3 else
                            (level_hist[-1] / level_hist[0] if len(level_hist) > 1 and level_hist[0] > 0 else 0.0))
    # report the defect of the plain fixed-point map at the final iterate
    ctls = []
    X_chk, _, ctls = _forward(sysobj, P)
    P_chk, Zs = _backward(sysobj, X_chk)
    final = max(float(np.max(np.abs(a - b))) for a, b in zip(P_chk, P))
    history.append(final)
    return _package(sysobj, X_chk, P_chk, Zs, ctls, total_iter, history,
                    method=f"continuation({steps})", level_ratios=level_ratios)


# -- node-independent gains for full-space sets --------------------------------

@dataclass
class LinearLatticeSolution:
    """Per-layer gains of the unconstrained discrete system.

    Adjoints satisfy ``P(i) = M[i] X(i)``, the conditional pair
    ``(p̄, q) = S[i] X(i)``, controls ``u = Ku[i] X``, ``v = Kv[i] X`` and the
    closed loop ``X(i+1) = X(i) + F[i] X dt + G[i] X ξ``.  For the follower
    system ``X = x`` and Ku is zero; for the leader system ``X = (x, k)``.
    """

    T: float
    N: int
    kind: str
    M: np.ndarray
    S: np.ndarray
    Ku: np.ndarray
    Kv: np.ndarray
    F: np.ndarray
    G: np.ndarray
    X0: np.ndarray

    @property
    def dt(self):
        return self.T / self.N

    def second_moments(self):
        """Exact ``E[X Xᵀ]`` per layer (mean and variance of ξ are all that matter)."""
        E = [np.outer(self.X0, self.X0)]
        for i in range(self.N):
            Ai = np.eye(len(self.X0)) + self.F[i] * self.dt
            E.append(Ai @ E[i] @ Ai.T + self.dt * self.G[i] @ E[i] @ self.G[i].T)
        return E

    def costs(self, spec):
        """Exact discrete (J1, J2) on the lattice."""
        n = spec.n
        E = self.second_moments()
        J1 = J2 = 0.0
        for i in range(self.N):
            c = spec.coeffs(i * self.dt)
            Ex = E[i][:n, :n]
            J1 += 0.5 * self.dt * (np.trace(c.Q1 @ Ex) + np.trace(c.R1 @ self.Ku[i] @ E[i] @ self.Ku[i].T))
            J2 += 0.5 * self.dt * (np.trace(c.Q2 @ Ex) + np.trace(c.R2 @ self.Kv[i] @ E[i] @ self.Kv[i].T))
        ExN = E[self.N][:n, :n]
        J1 += 0.5 * np.trace(spec.Phi1 @ ExN)
        J2 += 0.5 * np.trace(spec.Phi2 @ ExN)
        return float(J1), float(J2)


def linear_lattice_solution(spec, N, system="leader"):
    """Discrete gains for full-space control sets at any number of steps ``N``.

    With no constraints and deterministic coefficients the decoupling field
    of the tree system is the same at every node of a layer, so one
    representative node per layer suffices.
    """
    if not (spec.gamma2.is_full and (system == "follower" or spec.gamma1.is_full)):
        raise ValueError("per-layer gains exist only for full-space control sets")
    lat = Lattice(spec.T, N, recombining=True)
    zeros_u = [np.zeros((1, spec.m1)) for _ in range(N)]
    sysobj = _TreeSystem(spec, lat, system, zeros_u if system == "follower" else None)
    a, b = sysobj.a, sysobj.b
    M = np.zeros((N + 1, b, a))
    S = np.zeros((N, 2 * b, a))
    M[N] = sysobj.Phi
    Fl = np.zeros((N, a, a))
    Gl = np.zeros((N, a, a))
    Ku = np.zeros((N, spec.m1, a))
    Kv = np.zeros((N, spec.m2, a))
    Z0 = np.zeros((1, 2 * b))
    zero_a = np.zeros((1, a))
    zero_b = np.zeros((1, b))
    for i in range(N - 1, -1, -1):
        ctl = sysobj.controls(i, Z0)
        FX, FZ, f0, GX, GZ, g0 = sysobj.linear_pieces(i, Z0, ctl)
        Mi = M[i + 1][None]
        SXi, _ = _node_solve(lat, (Mi, Mi), (zero_b, zero_b), FX, FZ, zero_a, GX, GZ,
                             zero_a, 1.0, b)
        S[i] = SXi[0]
        HX, HZ = sysobj.driver_matrices(i)
        M[i] = S[i][:b] + lat.dt * (HX + HZ @ S[i])
        Fl[i] = FX + FZ[0] @ S[i]
        Gl[i] = GX + GZ[0] @ S[i]
        c = sysobj.c[i]
        n = spec.n
        if system == "follower":
            pq = S[i]
            Kv[i] = -c.R2inv @ (c.B2.T @ pq[:n] + c.D2.T @ pq[n:])
        else:
            Ku[i] = -c.R1inv @ (c.B1.T @ S[i][:n] + c.D1.T @ S[i][b:b + n])
            Kv[i] = -c.R2inv @ (c.B2.T @ S[i][n:b] + c.D2.T @ S[i][b + n:])
    return LinearLatticeSolution(spec.T, N, system, M, S, Ku, Kv, Fl, Gl, sysobj.X0.copy())


# -- costs and checks --------------------------------------------------------

def tree_states(spec, lattice, u, v):
    """Forward states on the full tree for given node controls."""
    x = [spec.x0[None, :].copy()]
    for i in range(lattice.N):
        c = spec.coeffs(lattice.time(i))
        F = x[i] @ c.A.T + np.asarray(u[i]) @ c.B1.T + np.asarray(v[i]) @ c.B2.T
        G = x[i] @ c.C.T + np.asarray(u[i]) @ c.D1.T + np.asarray(v[i]) @ c.D2.T
        x.append(lattice.expand(x[i] + F * lattice.dt) + lattice.expand(G) * lattice.xi(i + 1)[:, None])
    return x


def tree_costs(spec, lattice, x, u, v):
    """Discrete (J1, J2): left-point running cost plus terminal cost."""
    J1 = J2 = 0.0
    for i in range(lattice.N):
        c = spec.coeffs(lattice.time(i))
        w = lattice.weights(i)
        xi, ui, vi = np.asarray(x[i]), np.asarray(u[i]), np.asarray(v[i])
        J1 += 0.5 * lattice.dt * w @ (np.einsum("si,ij,sj->s", xi, c.Q1, xi) +
                                      np.einsum("si,ij,sj->s", ui, c.R1, ui))
        J2 += 0.5 * lattice.dt * w @ (np.einsum("si,ij,sj->s", xi, c.Q2, xi) +
                                      np.einsum("si,ij,sj->s", vi, c.R2, vi))
    xN = np.asarray(x[lattice.N])
    w = lattice.weights(lattice.N)
    J1 += 0.5 * w @ np.einsum("si,ij,sj->s", xN, spec.Phi1, xN)
    J2 += 0.5 * w @ np.einsum("si,ij,sj->s", xN, spec.Phi2, xN)
    return float(J1), float(J2)


def solution_costs(spec, sol):
    return tree_costs(spec, sol.lattice, sol.x.layers, sol.u.layers, sol.v.layers)


@dataclass
class MaxPrincipleReport:
    r_v: list
    r_u: list
    vi_violation_v: list
    vi_violation_u: list
    stationarity_v: list
    stationarity_u: list

    @staticmethod
    def _max(layers):
        return max((float(np.max(a)) for a in layers if a is not None and a.size), default=0.0)

    @property
    def max_r_v(self):
        return self._max(self.r_v)

    @property
    def max_r_u(self):
        return self._max(self.r_u)

    @property
    def max_violation(self):
        return max(self._max(self.vi_violation_v), self._max(self.vi_violation_u))

    @property
    def max_residual(self):
        return max(self.max_r_v, self.max_r_u)

    def to_dict(self):
        return {"max_r_v": self.max_r_v, "max_r_u": self.max_r_u,
                "max_variational_violation": self.max_violation,
                "max_stationarity_v": self._max(self.stationarity_v),
                "max_stationarity_u": self._max(self.stationarity_u)}


def _vi_probe(cset, rng, grad, ctrl, probes):
    S, m = ctrl.shape
    worst = np.zeros(S)
    for s in range(S):
        Y = cset.sample(rng, probes)
        vals = (Y - ctrl[s]) @ grad[s]
        worst[s] = max(0.0, -float(vals.min()))
    return worst


def max_principle_residual(spec, lattice, solution, probes=32, seed=0):
    """Projection residuals and variational-inequality probes at every node."""
    rng = np.random.default_rng(seed)
    leader = isinstance(solution, LeaderSystemSolution)
    r_v, r_u, vi_v, vi_u, st_v, st_u = [], [], [], [], [], []
    for i in range(lattice.N):
        c = spec.coeffs(lattice.time(i))
        pb2, q2, v = solution.p2bar[i], solution.q2[i], solution.v[i]
        pre = -(pb2 @ c.B2 + q2 @ c.D2) @ c.R2inv
        r_v.append(np.linalg.norm(v - project(spec.gamma2, c.metric2, pre), axis=1))
        grad_v = pb2 @ c.B2 + q2 @ c.D2 + v @ c.R2
        st_v.append(np.linalg.norm(grad_v, axis=1))
        vi_v.append(_vi_probe(spec.gamma2, rng, grad_v, v, probes))
        if leader:
            pb1, q1, u = solution.p1bar[i], solution.q1[i], solution.u[i]
            pre_u = -(pb1 @ c.B1 + q1 @ c.D1) @ c.R1inv
            r_u.append(np.linalg.norm(u - project(spec.gamma1, c.metric1, pre_u), axis=1))
            grad_u = pb1 @ c.B1 + q1 @ c.D1 + u @ c.R1
            st_u.append(np.linalg.norm(grad_u, axis=1))
            vi_u.append(_vi_probe(spec.gamma1, rng, grad_u, u, probes))
    return MaxPrincipleReport(r_v, r_u, vi_v, vi_u, st_v, st_u)


def ito_product_check(spec, lattice, sol):
    """``E<Φ2 x(N), x(N)>`` directly and by telescoping ``<p2, x>`` increments."""
    n = spec.n
    xN = sol.x[lattice.N]
    w = lattice.weights(lattice.N)
    direct = float(w @ np.einsum("si,ij,sj->s", xN, spec.Phi2, xN))
    total = float(sol.p2[0][0] @ sol.x[0][0])
    for i in range(lattice.N):
        c = spec.coeffs(lattice.time(i))
        x, u, v = sol.x[i], sol.u[i], sol.v[i]
        pb, q = sol.p2bar[i], sol.q2[i]
        inc = (np.einsum("si,si->s", pb @ c.B2 + q @ c.D2, v)
               + np.einsum("si,si->s", pb @ c.B1 + q @ c.D1, u)
               - np.einsum("si,ij,sj->s", x, c.Q2, x))
        total += lattice.dt * float(lattice.weights(i) @ inc)
    if sol.k is not None:
        # the follower adjoint of the leader system has no k-dependence
        pass
    _ = n
    return direct, total
