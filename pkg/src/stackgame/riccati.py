"""Riccati equations for the unconstrained game and for single-player LQ.

With ``X = (x, k)``, ``P = (p1, p2)``, ``Q = (q1, q2)`` the unconstrained
optimality system reads ::

    dX = (𝓐X − 𝓑₁P − 𝓑₂Q) dt + (𝓒X − 𝓓₁P − 𝓓₂Q) dW,   X(0) = (x0, 0)
    −dP = (𝓐ᵀP + 𝓒ᵀQ + Q̂₁X) dt − Q dW,                 P(T) = Φ̂ X(T)

and ``P = 𝓡X`` with ``d𝓡/dt = −Π(𝓡)`` (coefficients deterministic, so the
martingale part of 𝓡 vanishes).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionViolated, BlowUp, SingularMatrix

COND_GUARD = 1e12
BLOWUP = 1e8
RATIO_TOL = 1e-10
SYM_TOL = 1e-12


@dataclass
class AugmentedSystem:
    """Piecewise-constant 2n×2n blocks; ``blocks(t)`` returns those in force at t."""

    n: int
    T: float
    breaks: np.ndarray
    pieces: list
    Phi_hat: np.ndarray
    X0: np.ndarray

    def blocks(self, t):
        k = max(0, int(np.searchsorted(self.breaks, t, side="right")) - 1)
        return self.pieces[k]

    def __getattr__(self, name):
        # constant-coefficient convenience: aug.B1 etc. read the first piece
        if name in ("A", "C", "B1", "B2", "D1", "D2", "Q1"):
            return self.__dict__["pieces"][0][name]
        raise AttributeError(name)


def _safe_inv(M, what):
    c = np.linalg.cond(M)
    if not np.isfinite(c) or c > COND_GUARD:
        raise SingularMatrix(f"{what} is numerically singular (condition {c:.3e})")
    return np.linalg.inv(M)


def build_augmented(spec):
    n = spec.n
    Z = np.zeros((n, n))
    pieces = []
    for t in spec.breakpoints:
        A, C = spec.A(t), spec.C(t)
        B1, B2, D1, D2 = spec.B1(t), spec.B2(t), spec.D1(t), spec.D2(t)
        R1i = _safe_inv(spec.R1(t), "R1")
        R2i = _safe_inv(spec.R2(t), "R2")
        pieces.append({
            "A": np.block([[A, Z], [Z, A]]),
            "C": np.block([[C, Z], [Z, C]]),
            "B1": np.block([[B1 @ R1i @ B1.T, B2 @ R2i @ B2.T], [-B2 @ R2i @ B2.T, Z]]),
            "B2": np.block([[B1 @ R1i @ D1.T, B2 @ R2i @ D2.T], [-B2 @ R2i @ D2.T, Z]]),
            "D1": np.block([[D1 @ R1i @ B1.T, D2 @ R2i @ B2.T], [-D2 @ R2i @ B2.T, Z]]),
            "D2": np.block([[D1 @ R1i @ D1.T, D2 @ R2i @ D2.T], [-D2 @ R2i @ D2.T, Z]]),
            "Q1": np.block([[spec.Q1(t), -spec.Q2(t)], [spec.Q2(t), Z]]),
        })
    Phi_hat = np.block([[spec.Phi1, -spec.Phi2], [spec.Phi2, Z]])
    X0 = np.concatenate([spec.x0, np.zeros(n)])
    return AugmentedSystem(n, spec.T, np.asarray(spec.breakpoints, float), pieces, Phi_hat, X0)


@dataclass
class RiccatiSolution:
    times: np.ndarray
    R: np.ndarray
    Xi: np.ndarray
    Pi: np.ndarray = field(repr=False)
    psi_zero: bool = True

    def _locate(self, t):
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        return k

    def at(self, t):
        """𝓡(t) by cubic Hermite interpolation (uses dR/dt = −Π)."""
        k = self._locate(t)
        t0, t1 = self.times[k], self.times[k + 1]
        h = t1 - t0
        s = (t - t0) / h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (h00 * self.R[k] + h10 * h * (-self.Pi[k]) + h01 * self.R[k + 1]
                + h11 * h * (-self.Pi[k + 1]))

    def xi_at(self, t, aug):
        return _xi(self.at(t), aug.blocks(min(t, aug.T)))

    def to_rows(self):
        d = self.R.shape[1]
        head = ["t"] + [f"R{i}{j}" for i in range(d) for j in range(d)] + \
               [f"Xi{i}{j}" for i in range(d) for j in range(d)]
        rows = [[t, *self.R[k].ravel(), *self.Xi[k].ravel()] for k, t in enumerate(self.times)]
        return head, rows


def _xi(R, b):
    d = R.shape[0]
    M = np.eye(d) + R @ b["D2"]
    c = np.linalg.cond(M)
    if not np.isfinite(c) or c > COND_GUARD:
        raise SingularMatrix(f"I + R D2 is numerically singular (condition {c:.3e})")
    return np.linalg.solve(M, R @ b["C"] - R @ b["D1"] @ R)


def _pi(R, b):
    Xi = _xi(R, b)
    return b["A"].T @ R + b["C"].T @ Xi + b["Q1"] + R @ (b["A"] - b["B1"] @ R - b["B2"] @ Xi)


def make_grid(T, M, breaks=()):
    """Uniform grid with ``M`` steps, refined so every breakpoint is a node."""
    if isinstance(M, (list, tuple, np.ndarray)):
        grid = np.asarray(M, dtype=float)
    else:
        if int(M) < 1:
            raise ValueError("grid needs at least one step")
        grid = np.linspace(0.0, T, int(M) + 1)
    grid = np.union1d(grid, [b for b in breaks if 0 < b < T])
    return grid


def _integrate(field_fn, blocks_fn, terminal, grid):
    """Classical RK4 backward in time for ``dR/dt = −field(R, blocks)``."""
    M = len(grid) - 1
    R = np.empty((M + 1,) + terminal.shape)
    R[M] = terminal
    for k in range(M, 0, -1):
        t1, t0 = grid[k], grid[k - 1]
        h = t1 - t0
        b = blocks_fn(0.5 * (t0 + t1))
        Y = R[k]
        # s = T − t runs forward: dR/ds = field
        k1 = field_fn(Y, b)
        k2 = field_fn(Y + 0.5 * h * k1, b)
        k3 = field_fn(Y + 0.5 * h * k2, b)
        k4 = field_fn(Y + h * k3, b)
        R[k - 1] = Y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(R[k - 1])) or np.max(np.abs(R[k - 1])) > BLOWUP:
            raise BlowUp(f"Riccati solution escapes before t = {t0:.6g}", escape_time=float(t0))
    return R


def solve_riccati(aug, grid=1000):
    times = make_grid(aug.T, grid, aug.breaks)
    R = _integrate(_pi, aug.blocks, aug.Phi_hat.copy(), times)
    blk = [aug.blocks(min(t, aug.T)) if k == len(times) - 1 else aug.blocks(t)
           for k, t in enumerate(times)]
    Xi = np.stack([_xi(R[k], blk[k]) for k in range(len(times))])
    Pi = np.stack([_pi(R[k], blk[k]) for k in range(len(times))])
    return RiccatiSolution(times, R, Xi, Pi)


# -- symmetrization (n = 1) ----------------------------------------------------

@dataclass
class UpsilonTransform:
    lam: float
    mu: float
    Upsilon: np.ndarray
    Upsilon_inv: np.ndarray
    aug: AugmentedSystem
    bar_pieces: list
    Phi_bar: np.ndarray

    def blocks(self, t):
        k = max(0, int(np.searchsorted(self.aug.breaks, t, side="right")) - 1)
        return self.bar_pieces[k]

    def transformed(self, t=0.0):
        b = self.blocks(t)
        return {"B1": b["B1"], "B2": b["B2"], "D1": b["D1"], "D2": b["D2"],
                "Q1": b["Q1"], "Phi1": self.Phi_bar}

    def max_asymmetry(self):
        worst = float(np.max(np.abs(self.Phi_bar - self.Phi_bar.T)))
        for b in self.bar_pieces:
            for key in ("B1", "B2", "D1", "D2", "Q1"):
                worst = max(worst, float(np.max(np.abs(b[key] - b[key].T))))
        return worst


def _ratio(num, den, what, failures, tol=RATIO_TOL):
    """Common ratio of (num_i / den_i) over pairs; None when every pair is 0/0."""
    ratio = None
    for a, b in zip(num, den):
        if abs(b) > tol:
            r = a / b
            if ratio is None:
                ratio = r
    if ratio is None:
        if any(abs(a) > tol for a in num):
            failures.append(f"{what}: leader-side denominators vanish but numerators do not")
            return 0.0
        return 0.0
    for a, b in zip(num, den):
        gap = abs(a - ratio * b)
        if gap > tol * max(1.0, abs(a), abs(ratio * b)):
            failures.append(f"{what}: ratio mismatch {gap:.3e}")
    return ratio


def upsilon_transform(spec):
    if spec.n != 1:
        raise AssumptionViolated("the symmetrizing transform is defined for n = 1 only",
                                 [f"n = {spec.n}"])
    failures = []
    aug = build_augmented(spec)
    q1 = [float(spec.Q1(t)[0, 0]) for t in spec.breakpoints]
    q2 = [float(spec.Q2(t)[0, 0]) for t in spec.breakpoints]
    lam = _ratio(q2 + [spec.Phi2[0, 0]], q1 + [spec.Phi1[0, 0]], "Q2/Q1 = Phi2/Phi1", failures)
    num, den = [], []
    for t in spec.breakpoints:
        r1, r2 = spec.R1(t)[0, 0], spec.R2(t)[0, 0]
        b1, b2, d1, d2 = spec.B1(t)[0, 0], spec.B2(t)[0, 0], spec.D1(t)[0, 0], spec.D2(t)[0, 0]
        num += [b2 * b2 / r2, b2 * d2 / r2, d2 * d2 / r2]
        den += [b1 * b1 / r1, b1 * d1 / r1, d1 * d1 / r1]
    mu = _ratio(num, den, "control-channel ratios", failures)
    if failures:
        raise AssumptionViolated("ratio assumptions fail", failures)
    U = np.array([[1.0, -2.0 * mu], [2.0 * lam, 1.0]])
    Ui = np.array([[1.0, 2.0 * mu], [-2.0 * lam, 1.0]]) / (1.0 + 4.0 * lam * mu)
    bar = []
    for b in aug.pieces:
        bar.append({"A": b["A"], "C": b["C"], "B1": b["B1"] @ U, "B2": b["B2"] @ U,
                    "D1": b["D1"] @ U, "D2": b["D2"] @ U, "Q1": Ui @ b["Q1"]})
    ut = UpsilonTransform(lam, mu, U, Ui, aug, bar, Ui @ aug.Phi_hat)
    asym = ut.max_asymmetry()
    if asym > SYM_TOL * max(1.0, max(np.max(np.abs(v)) for b in bar for v in b.values())):
        raise AssumptionViolated("transformed matrices are not symmetric", [f"asymmetry {asym:.3e}"])
    for name, M in [("Q1bar", b["Q1"]) for b in bar] + [("Phi1bar", ut.Phi_bar)]:
        e = np.linalg.eigvalsh(0.5 * (M + M.T))[0]
        if e < -1e-10:
            raise AssumptionViolated("transformed weight is not positive semidefinite",
                                     [f"{name} min eigenvalue {e:.3e}"])
    return ut


@dataclass
class SymmetrizedSolution:
    bar: RiccatiSolution
    R: np.ndarray
    Upsilon: np.ndarray

    @property
    def times(self):
        return self.bar.times


def solve_symmetrized_riccati(ut, grid=1000):
    times = make_grid(ut.aug.T, grid, ut.aug.breaks)
    Rbar = _integrate(_pi, ut.blocks, ut.Phi_bar.copy(), times)
    Xi = np.stack([_xi(Rbar[k], ut.blocks(t)) for k, t in enumerate(times)])
    Pi = np.stack([_pi(Rbar[k], ut.blocks(t)) for k, t in enumerate(times)])
    bar = RiccatiSolution(times, Rbar, Xi, Pi)
    return SymmetrizedSolution(bar, np.einsum("ij,kjl->kil", ut.Upsilon, Rbar), ut.Upsilon)


# -- single-player form --------------------------------------------------------

@dataclass
class TangRiccatiSolution:
    times: np.ndarray
    K: np.ndarray
    Z: np.ndarray
    data: dict = field(repr=False)

    def gain(self, k):
        """Feedback matrix G with ``u = G x`` at grid index ``k``."""
        d = self.data
        return -d["Ninv"] @ (d["B"].T @ self.K[k] + d["D"].T @ self.Z[k])

    def gain_at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-12 * max(1.0, abs(t)):
            raise ValueError("time is not a grid node")
        return self.gain(k)


def solve_tang_riccati(A, B, C, D, Q, N, M, grid, T=None):
    """Backward RK4 for ``dK/dt = −K₁`` with ``K(T) = M``.

    ``grid`` is an array of times, or a number of steps together with ``T``.
    """
    A, B, C, D, Q, N, M = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, C, D, Q, N, M))
    Ninv = _safe_inv(N, "N")
    if isinstance(grid, (int, np.integer)):
        if T is None:
            raise ValueError("T is required when grid is a step count")
        times = make_grid(T, int(grid))
    else:
        times = np.asarray(grid, dtype=float)
    BNB = B @ Ninv @ B.T
    BND = B @ Ninv @ D.T
    DNB = D @ Ninv @ B.T
    DND = D @ Ninv @ D.T

    def zfun(K):
        S = np.eye(K.shape[0]) + K @ DND
        c = np.linalg.cond(S)
        if not np.isfinite(c) or c > COND_GUARD:
            raise SingularMatrix(f"I + K D N⁻¹ Dᵀ is numerically singular (condition {c:.3e})")
        return np.linalg.solve(S, K @ C - K @ DNB @ K)

    def k1(K, _b):
        Zm = zfun(K)
        return A.T @ K + C.T @ Zm + Q + K @ A - K @ BNB @ K - K @ BND @ Zm

    K = _integrate(k1, lambda t: None, M.copy(), times)
    Z = np.stack([zfun(Kk) for Kk in K])
    return TangRiccatiSolution(times, K, Z, {"A": A, "B": B, "C": C, "D": D, "Q": Q,
                                             "N": N, "M": M, "Ninv": Ninv})


def duality_errors(spec, aug, ric, sol):
    """Max-node ``|P − 𝓡X|`` and ``|Q − ΞX|`` for a leader tree solution.

    ``P`` and ``Q`` are taken at the same layer: ``P(i)`` from the node value
    and ``Q(i)`` from the extracted integrand at layer i.
    """
    lat = sol.lattice
    errP = errQ = 0.0
    for i in range(lat.N + 1):
        t = lat.time(i)
        R = ric.at(t)
        X = np.hstack([sol.x[i], sol.k[i]])
        P = np.hstack([sol.p1[i], sol.p2[i]])
        errP = max(errP, float(np.max(np.abs(P - X @ R.T))))
        if i < lat.N:
            Xi = _xi(R, aug.blocks(t))
            Q = np.hstack([sol.q1[i], sol.q2[i]])
            errQ = max(errQ, float(np.max(np.abs(Q - X @ Xi.T))))
    return errP, errQ
