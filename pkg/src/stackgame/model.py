"""Game instances, standing-assumption checks and the LQ Hamiltonians."""

from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedSpec
from .projection import FullSpace, WeightedMetric, phi2

COEFF_NAMES = ("A", "B1", "B2", "C", "D1", "D2", "Q1", "Q2", "R1", "R2")
SYM_TOL = 1e-12
PSD_TOL = -1e-10
DEFAULT_DELTA_R = 1e-6


class PiecewiseConstant:
    """Matrix-valued step function on ``[0, T]`` with left-closed pieces.

    ``breaks[k]`` is the left end of piece k; the first break is 0.
    """

    def __init__(self, breaks, values):
        breaks = np.asarray(breaks, dtype=float).ravel()
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or values.shape[0] != breaks.size:
            raise MalformedSpec("piecewise coefficient needs one matrix per breakpoint")
        if breaks.size == 0 or breaks[0] != 0.0:
            raise MalformedSpec("first breakpoint must be t_from = 0")
        if np.any(np.diff(breaks) <= 0):
            raise MalformedSpec("breakpoints must be strictly increasing")
        self.breaks = breaks
        self.values = values

    @classmethod
    def constant(cls, M):
        return cls([0.0], np.atleast_2d(np.asarray(M, dtype=float))[None])

    @property
    def shape(self):
        return self.values.shape[1:]

    def index(self, t):
        return max(0, int(np.searchsorted(self.breaks, t, side="right")) - 1)

    def __call__(self, t):
        return self.values[self.index(t)]

    def on_grid(self, grid):
        """Re-express on a finer breakpoint grid (values repeated)."""
        return PiecewiseConstant(grid, np.stack([self(t) for t in grid]))

    def is_constant(self):
        return self.breaks.size == 1


@dataclass(frozen=True)
class Coeffs:
    """All coefficient matrices frozen at one time, plus cached inverses."""

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    R1inv: np.ndarray = field(repr=False)
    R2inv: np.ndarray = field(repr=False)
    metric1: WeightedMetric = field(repr=False)
    metric2: WeightedMetric = field(repr=False)


@dataclass(frozen=True, eq=False)
class GameSpec:
    """A linear-quadratic Stackelberg game with deterministic coefficients."""

    n: int
    m1: int
    m2: int
    T: float
    x0: np.ndarray
    A: PiecewiseConstant
    B1: PiecewiseConstant
    B2: PiecewiseConstant
    C: PiecewiseConstant
    D1: PiecewiseConstant
    D2: PiecewiseConstant
    Q1: PiecewiseConstant
    Q2: PiecewiseConstant
    R1: PiecewiseConstant
    R2: PiecewiseConstant
    Phi1: np.ndarray
    Phi2: np.ndarray
    gamma1: object = None
    gamma2: object = None
    delta_R: float = DEFAULT_DELTA_R

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        set_("Phi1", np.atleast_2d(np.asarray(self.Phi1, dtype=float)))
        set_("Phi2", np.atleast_2d(np.asarray(self.Phi2, dtype=float)))
        for name in COEFF_NAMES:
            val = getattr(self, name)
            if not isinstance(val, PiecewiseConstant):
                set_(name, PiecewiseConstant.constant(val))
        if self.gamma1 is None:
            set_("gamma1", FullSpace(self.m1))
        if self.gamma2 is None:
            set_("gamma2", FullSpace(self.m2))
        grid = np.unique(np.concatenate([getattr(self, k).breaks for k in COEFF_NAMES]))
        set_("breakpoints", grid)
        set_("_cache", {})

    @classmethod
    def scalar(cls, T=1.0, x0=1.0, gamma1=None, gamma2=None, delta_R=DEFAULT_DELTA_R, **coef):
        """Convenience constructor for n = m1 = m2 = 1; omitted weights default to 0."""
        vals = {k: 0.0 for k in COEFF_NAMES + ("Phi1", "Phi2")}
        vals["R1"] = vals["R2"] = 1.0
        vals.update(coef)
        mats = {k: np.array([[float(v)]]) for k, v in vals.items()}
        return cls(1, 1, 1, float(T), [float(x0)], gamma1=gamma1, gamma2=gamma2,
                   delta_R=delta_R, **mats)

    def replace(self, **changes):
        kw = {k: getattr(self, k) for k in ("n", "m1", "m2", "T", "x0", *COEFF_NAMES,
                                            "Phi1", "Phi2", "gamma1", "gamma2", "delta_R")}
        kw.update(changes)
        return GameSpec(**kw)

    def piece(self, t):
        return max(0, int(np.searchsorted(self.breakpoints, t, side="right")) - 1)

    def coeffs(self, t):
        """Coefficients in force at time ``t`` (cached per breakpoint piece)."""
        k = self.piece(t)
        hit = self._cache.get(k)
        if hit is None:
            t0 = self.breakpoints[k]
            mats = {name: getattr(self, name)(t0) for name in COEFF_NAMES}
            hit = Coeffs(**mats, R1inv=np.linalg.inv(mats["R1"]), R2inv=np.linalg.inv(mats["R2"]),
                         metric1=WeightedMetric(mats["R1"]), metric2=WeightedMetric(mats["R2"]))
            self._cache[k] = hit
        return hit


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    detail: str = ""

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed),
                "residual": float(self.residual), "detail": self.detail}


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_dict(self):
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _check_dims(spec):
    n, m1, m2 = spec.n, spec.m1, spec.m2
    if min(n, m1, m2) < 1:
        raise MalformedSpec("dimensions must be positive")
    if not (np.isfinite(spec.T) and spec.T > 0):
        raise MalformedSpec("horizon T must be positive and finite")
    want = {"A": (n, n), "C": (n, n), "B1": (n, m1), "D1": (n, m1), "B2": (n, m2),
            "D2": (n, m2), "Q1": (n, n), "Q2": (n, n), "R1": (m1, m1), "R2": (m2, m2)}
    for name, shape in want.items():
        got = getattr(spec, name).shape
        if got != shape:
            raise MalformedSpec(f"{name} has shape {got}, expected {shape}")
        if getattr(spec, name).breaks[-1] >= spec.T:
            raise MalformedSpec(f"{name} has a breakpoint at or beyond T")
    for name in ("Phi1", "Phi2"):
        if getattr(spec, name).shape != (n, n):
            raise MalformedSpec(f"{name} has shape {getattr(spec, name).shape}, expected {(n, n)}")
    if spec.x0.shape != (n,):
        raise MalformedSpec(f"x0 has shape {spec.x0.shape}, expected {(n,)}")
    if spec.gamma1.dim != m1 or spec.gamma2.dim != m2:
        raise MalformedSpec("constraint set dimensions do not match m1, m2")
    if not (spec.delta_R > 0):
        raise MalformedSpec("delta_R must be positive")


def _sym_residual(M):
    return float(np.max(np.abs(M - M.T), initial=0.0))


def _min_eig(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def validate_spec(spec):
    """Check symmetry / semidefiniteness / uniform positivity of all weights.

    Raises ``MalformedSpec`` for dimension problems; everything else is
    reported in the returned ``ValidationReport``.
    """
    _check_dims(spec)
    checks = []
    finite = all(np.all(np.isfinite(getattr(spec, k).values)) for k in COEFF_NAMES)
    finite = finite and np.all(np.isfinite(spec.Phi1)) and np.all(np.isfinite(spec.Phi2))
    finite = finite and np.all(np.isfinite(spec.x0))
    checks.append(CheckResult("(H1) finite coefficients", bool(finite), 0.0 if finite else np.inf))

    def semidef(label, M):
        r = _sym_residual(M)
        checks.append(CheckResult(f"(H2) symmetry {label}", r <= SYM_TOL, r))
        e = _min_eig(M)
        checks.append(CheckResult(f"(H2) nonnegativity {label}", e >= PSD_TOL, e))

    def posdef(label, M):
        r = _sym_residual(M)
        checks.append(CheckResult(f"(H3) symmetry {label}", r <= SYM_TOL, r))
        e = _min_eig(M)
        checks.append(CheckResult(f"(H3) uniform positivity {label}", e >= spec.delta_R, e,
                                  f"min eigenvalue vs delta_R = {spec.delta_R:g}"))

    for t in spec.breakpoints:
        tag = f"@t={t:g}"
        semidef(f"Q1 {tag}", spec.Q1(t))
        semidef(f"Q2 {tag}", spec.Q2(t))
        posdef(f"R1 {tag}", spec.R1(t))
        posdef(f"R2 {tag}", spec.R2(t))
    semidef("Phi1", spec.Phi1)
    semidef("Phi2", spec.Phi2)
    return ValidationReport(checks)


def hamiltonian_h2(spec, t, x, u, v, p2, q2):
    """Follower Hamiltonian ``<p2, b> + <q2, σ> + ½(<Q2x,x> + <R2v,v>)``."""
    c = spec.coeffs(t)
    x, u, v, p2, q2 = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (x, u, v, p2, q2))
    drift = c.A @ x + c.B1 @ u + c.B2 @ v
    diff = c.C @ x + c.D1 @ u + c.D2 @ v
    return float(p2 @ drift + q2 @ diff + 0.5 * (x @ c.Q2 @ x + v @ c.R2 @ v))


def hamiltonian_h1(spec, t, u, x, k, p1, p2, q1, q2):
    """Leader Hamiltonian with the follower's response ``φ2(t, p2, q2)`` substituted."""
    c = spec.coeffs(t)
    u, x, k, p1, p2, q1, q2 = (np.atleast_1d(np.asarray(a, dtype=float))
                               for a in (u, x, k, p1, p2, q1, q2))
    v = phi2(spec, t, p2, q2)
    drift = c.A @ x + c.B1 @ u + c.B2 @ v
    diff = c.C @ x + c.D1 @ u + c.D2 @ v
    running = 0.5 * (x @ c.Q1 @ x + u @ c.R1 @ u)
    coupling = k @ (c.A.T @ p2 + c.C.T @ q2 + c.Q2 @ x)
    return float(p1 @ drift + q1 @ diff + running - coupling)
