"""Projections onto closed convex control sets in an R-weighted metric.

Every routine accepts a single point of shape ``(m,)`` or a batch of shape
``(k, m)`` and returns the same shape.  Exact closed forms cover

* ``FullSpace`` with any metric,
* ``Box``, ``Interval`` and ``NonnegativeOrthant`` with diagonal R,
* ``EuclideanBall`` with R = r I,
* ``Halfspace`` with any R.

Anything else falls back to projected gradient on ``f(z) = ½‖z − x‖²_R``
with Euclidean projection steps, followed by an exact solve on the active
face once the iterates have settled.
"""

import numpy as np

from .errors import MalformedSpec, ProjectionNotConverged

PG_TOL = 1e-12
PG_MAX_ITER = 100_000
ACTIVE_TOL = 1e-9
BISECT_ITER = 200


class WeightedMetric:
    """Inner product ``<<a, b>> = aᵀ R b`` for a symmetric positive-definite R."""

    def __init__(self, R):
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if R.shape[0] != R.shape[1]:
            raise MalformedSpec(f"metric must be square, got {R.shape}")
        if np.max(np.abs(R - R.T), initial=0.0) > 1e-12 * max(1.0, np.abs(R).max()):
            raise MalformedSpec("metric must be symmetric")
        eig = np.linalg.eigvalsh(R)
        if eig[0] <= 0:
            raise MalformedSpec("metric must be positive definite")
        self.R = R
        self.Rinv = np.linalg.inv(R)
        self.lam_min = float(eig[0])
        self.lam_max = float(eig[-1])
        off = R - np.diag(np.diag(R))
        self.is_diagonal = not np.any(off)
        self.is_scalar = self.is_diagonal and np.all(np.diag(R) == R[0, 0])

    @property
    def dim(self):
        return self.R.shape[0]

    def inner(self, a, b):
        return np.einsum("...i,ij,...j->...", a, self.R, b)

    def norm(self, a):
        return np.sqrt(np.maximum(self.inner(a, a), 0.0))


def as_metric(metric):
    return metric if isinstance(metric, WeightedMetric) else WeightedMetric(metric)


def _vec(x, m=None):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if m is not None and x.shape != (m,):
        raise MalformedSpec(f"expected a vector of length {m}, got shape {x.shape}")
    return x


class ConstraintSet:
    """Base class for the closed convex sets used as control domains."""

    kind = "abstract"

    def __init__(self, dim):
        self.dim = int(dim)
        if self.dim < 1:
            raise MalformedSpec("constraint set dimension must be positive")

    # subclasses override the pieces below
    def euclidean(self, Z):
        raise NotImplementedError

    def contains(self, z, tol=1e-12):
        Z = np.atleast_2d(z)
        ok = np.max(np.abs(self.euclidean(Z) - Z), axis=1) <= tol
        return bool(ok[0]) if np.ndim(z) == 1 else ok

    def exact_for(self, metric):
        return False

    def exact(self, X, metric):
        raise NotImplementedError

    def face_polish(self, X, Z, metric):
        return Z

    def active_normals(self, z, y, metric):
        """Rows of outward normals of linear constraints active at ``z``."""
        return np.zeros((0, self.dim))

    def sample(self, rng, size):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError

    @property
    def is_full(self):
        return False

    def __repr__(self):
        return f"{type(self).__name__}({self.to_dict()})"

    def __eq__(self, other):
        return type(self) is type(other) and _dict_equal(self.to_dict(), other.to_dict())

    def __hash__(self):
        return hash(self.kind)


def _dict_equal(a, b):
    if a.keys() != b.keys():
        return False
    for key in a:
        va, vb = a[key], b[key]
        if isinstance(va, (list, tuple)):
            if list(va) != list(vb):
                return False
        elif va != vb:
            return False
    return True


class FullSpace(ConstraintSet):
    kind = "full_space"

    @property
    def is_full(self):
        return True

    def euclidean(self, Z):
        return np.array(Z, dtype=float)

    def contains(self, z, tol=1e-12):
        return True if np.ndim(z) == 1 else np.ones(np.atleast_2d(z).shape[0], bool)

    def exact_for(self, metric):
        return True

    def exact(self, X, metric):
        return np.array(X, dtype=float)

    def sample(self, rng, size):
        return 3.0 * rng.standard_normal((size, self.dim))

    def to_dict(self):
        return {"type": self.kind, "dim": self.dim}


class Box(ConstraintSet):
    """Coordinatewise bounds ``lower <= z <= upper``; entries may be infinite."""

    kind = "box"

    def __init__(self, lower, upper):
        lower = _vec(lower)
        upper = _vec(upper)
        if lower.shape != upper.shape:
            raise MalformedSpec("box bounds must have equal length")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise MalformedSpec("box bounds must not be NaN")
        if np.any(lower > upper):
            raise MalformedSpec("box requires lower <= upper")
        super().__init__(lower.size)
        self.lower = lower
        self.upper = upper

    def euclidean(self, Z):
        return np.clip(Z, self.lower, self.upper)

    def exact_for(self, metric):
        return metric.is_diagonal

    def exact(self, X, metric):
        return np.clip(X, self.lower, self.upper)

    def _at_bounds(self, z):
        scale = 1.0 + np.abs(z)
        at_lo = np.abs(z - self.lower) <= ACTIVE_TOL * scale
        at_hi = np.abs(z - self.upper) <= ACTIVE_TOL * scale
        return at_lo, at_hi

    def face_polish(self, X, Z, metric):
        R = metric.R
        out = Z.copy()
        for r in range(Z.shape[0]):
            x, z = X[r], Z[r]
            at_lo, at_hi = self._at_bounds(z)
            act = at_lo | at_hi
            free = ~act
            cand = z.copy()
            cand[at_lo] = self.lower[at_lo]
            cand[at_hi] = self.upper[at_hi]
            if free.any():
                rhs = R[np.ix_(free, act)] @ (cand[act] - x[act])
                cand[free] = x[free] - np.linalg.solve(R[np.ix_(free, free)], rhs)
            grad = R @ (cand - x)
            feasible = np.all(cand >= self.lower - 1e-15) and np.all(cand <= self.upper + 1e-15)
            signs_ok = np.all(grad[at_lo & ~at_hi] >= -1e-12) and np.all(grad[at_hi & ~at_lo] <= 1e-12)
            if feasible and signs_ok:
                out[r] = np.clip(cand, self.lower, self.upper)
        return out

    def active_normals(self, z, y, metric):
        grad = metric.R @ (z - y)
        at_lo, at_hi = self._at_bounds(z)
        rows = []
        for i in range(self.dim):
            if at_hi[i] and grad[i] < 0:
                e = np.zeros(self.dim)
                e[i] = 1.0
                rows.append(e)
            elif at_lo[i] and grad[i] > 0:
                e = np.zeros(self.dim)
                e[i] = -1.0
                rows.append(e)
        return np.array(rows).reshape(-1, self.dim)

    def sample(self, rng, size):
        lo = np.where(np.isfinite(self.lower), self.lower, np.nan)
        hi = np.where(np.isfinite(self.upper), self.upper, np.nan)
        u = rng.random((size, self.dim))
        g = np.abs(rng.standard_normal((size, self.dim))) * 2.0
        both = np.isfinite(lo) & np.isfinite(hi)
        out = np.where(both, np.nan_to_num(lo) + u * np.nan_to_num(hi - lo), 0.0)
        only_lo = np.isfinite(lo) & ~np.isfinite(hi)
        only_hi = ~np.isfinite(lo) & np.isfinite(hi)
        out = np.where(only_lo, np.nan_to_num(lo) + g, out)
        out = np.where(only_hi, np.nan_to_num(hi) - g, out)
        neither = ~np.isfinite(lo) & ~np.isfinite(hi)
        out = np.where(neither, 3.0 * rng.standard_normal((size, self.dim)), out)
        return out

    def to_dict(self):
        def enc(v):
            return [None if not np.isfinite(a) else float(a) for a in v]

        return {"type": self.kind, "lower": enc(self.lower), "upper": enc(self.upper)}


class NonnegativeOrthant(Box):
    kind = "orthant"

    def __init__(self, dim):
        super().__init__(np.zeros(dim), np.full(dim, np.inf))

    def sample(self, rng, size):
        z = np.abs(rng.standard_normal((size, self.dim))) * 2.0
        z[rng.random((size, self.dim)) < 0.2] = 0.0
        return z

    def to_dict(self):
        return {"type": self.kind, "dim": self.dim}


class Interval(Box):
    kind = "interval"

    def __init__(self, lo, hi):
        super().__init__([lo], [hi])
        self.lo = float(lo)
        self.hi = float(hi)

    def to_dict(self):
        enc = lambda a: None if not np.isfinite(a) else float(a)  # noqa: E731
        return {"type": self.kind, "lo": enc(self.lo), "hi": enc(self.hi)}


class EuclideanBall(ConstraintSet):
    kind = "ball"

    def __init__(self, center, radius):
        center = _vec(center)
        if not np.isfinite(radius) or radius < 0:
            raise MalformedSpec("ball radius must be finite and nonnegative")
        super().__init__(center.size)
        self.center = center
        self.radius = float(radius)

    def euclidean(self, Z):
        d = Z - self.center
        nrm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.where(nrm > self.radius, self.radius / np.where(nrm > 0, nrm, 1.0), 1.0)
        return self.center + d * scale

    def exact_for(self, metric):
        return True

    def exact(self, X, metric):
        if metric.is_scalar:
            return self.euclidean(X)
        # z - c = (R + lam I)^{-1} R (x - c) with lam >= 0 fixed by |z - c| = r;
        # in the eigenbasis of R the norm is monotone in lam, so bisect per point
        e, V = np.linalg.eigh(metric.R)
        W = (X - self.center) @ V
        out = X.copy()
        outside = np.linalg.norm(X - self.center, axis=1) > self.radius
        if not np.any(outside):
            return out
        Wo = W[outside]
        if self.radius == 0:
            out[outside] = self.center
            return out

        def norm_at(lam):
            return np.linalg.norm(Wo * (e / (e + lam[:, None])), axis=1)

        lo = np.zeros(Wo.shape[0])
        hi = e[-1] * np.linalg.norm(Wo, axis=1) / self.radius
        for _ in range(BISECT_ITER):
            mid = 0.5 * (lo + hi)
            big = norm_at(mid) > self.radius
            lo = np.where(big, mid, lo)
            hi = np.where(big, hi, mid)
            if np.all(hi - lo <= 1e-16 * np.maximum(1.0, hi)):
                break
        lam = 0.5 * (lo + hi)
        Z = (Wo * (e / (e + lam[:, None]))) @ V.T
        # the final radial rescale puts the point exactly on the sphere
        Z *= self.radius / np.linalg.norm(Z, axis=1, keepdims=True)
        out[outside] = self.center + Z
        return out

    def sample(self, rng, size):
        d = rng.standard_normal((size, self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rad = self.radius * rng.random((size, 1)) ** (1.0 / self.dim)
        return self.center + rad * d

    def to_dict(self):
        return {"type": self.kind, "center": [float(c) for c in self.center], "radius": self.radius}


class Halfspace(ConstraintSet):
    """The set ``{z : a·z <= b}``."""

    kind = "halfspace"

    def __init__(self, a, b):
        a = _vec(a)
        if not np.any(a):
            raise MalformedSpec("halfspace normal must be nonzero")
        super().__init__(a.size)
        self.a = a
        self.b = float(b)

    def euclidean(self, Z):
        viol = np.maximum(0.0, Z @ self.a - self.b)
        return Z - np.outer(viol, self.a) / (self.a @ self.a)

    def exact_for(self, metric):
        return True

    def exact(self, X, metric):
        Ra = metric.Rinv @ self.a
        viol = np.maximum(0.0, X @ self.a - self.b)
        return X - np.outer(viol / (self.a @ Ra), Ra)

    def active_normals(self, z, y, metric):
        if y @ self.a - self.b > 0:
            return self.a[None, :]
        return np.zeros((0, self.dim))

    def sample(self, rng, size):
        y = 3.0 * rng.standard_normal((size, self.dim))
        slack = np.abs(rng.standard_normal(size))
        slack[rng.random(size) < 0.2] = 0.0
        viol = np.maximum(0.0, y @ self.a - self.b + slack)
        return y - np.outer(viol, self.a) / (self.a @ self.a)

    def to_dict(self):
        return {"type": self.kind, "a": [float(c) for c in self.a], "b": self.b}


def set_from_dict(doc, dim):
    """Build a constraint set from its config descriptor."""
    kind = doc.get("type")

    def dec(v, default):
        return default if v is None else float(v)

    try:
        if kind == "full_space":
            out = FullSpace(doc.get("dim", dim))
        elif kind == "orthant":
            out = NonnegativeOrthant(doc.get("dim", dim))
        elif kind == "box":
            lower = [dec(v, -np.inf) for v in doc["lower"]]
            upper = [dec(v, np.inf) for v in doc["upper"]]
            out = Box(lower, upper)
        elif kind == "interval":
            out = Interval(dec(doc["lo"], -np.inf), dec(doc["hi"], np.inf))
        elif kind == "ball":
            out = EuclideanBall(doc["center"], doc["radius"])
        elif kind == "halfspace":
            out = Halfspace(doc["a"], doc["b"])
        else:
            raise MalformedSpec(f"unknown constraint type {kind!r}")
    except KeyError as exc:
        raise MalformedSpec(f"constraint {kind!r} is missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise MalformedSpec(f"bad constraint descriptor {doc!r}: {exc}") from None
    if out.dim != dim:
        raise MalformedSpec(f"constraint {kind!r} has dimension {out.dim}, expected {dim}")
    return out


def _projected_gradient(cset, metric, X):
    R = metric.R
    step = 1.0 / metric.lam_max
    Z = cset.euclidean(X)
    live = np.arange(X.shape[0])
    for _ in range(PG_MAX_ITER):
        Zl, Xl = Z[live], X[live]
        Zn = cset.euclidean(Zl - step * (Zl - Xl) @ R)
        diff = np.max(np.abs(Zn - Zl), axis=1)
        Z[live] = Zn
        live = live[diff >= PG_TOL]
        if live.size == 0:
            break
    else:
        raise ProjectionNotConverged(
            f"projected gradient did not settle in {PG_MAX_ITER} iterations for {live.size} points"
        )
    return cset.face_polish(X, Z, metric)


def project(cset, metric, x):
    """Nearest point of ``cset`` to ``x`` in the norm induced by ``metric``."""
    metric = as_metric(metric)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != cset.dim or metric.dim != cset.dim:
        raise MalformedSpec(
            f"dimension mismatch: set {cset.dim}, metric {metric.dim}, point {X.shape[1]}"
        )
    if cset.exact_for(metric):
        Z = cset.exact(X, metric)
    else:
        Z = _projected_gradient(cset, metric, X.copy())
    return Z[0] if single else Z


def projection_jacobian(cset, metric, y, z=None):
    """B-derivative of ``y -> project(cset, metric, y)`` at a single point ``y``.

    Active linear constraints are frozen, so coordinates clamped by a box
    get a zero row and column.  Inactive points give the identity.
    """
    metric = as_metric(metric)
    y = _vec(y, cset.dim)
    if z is None:
        z = project(cset, metric, y)
    m = cset.dim
    if cset.is_full:
        return np.eye(m)
    if isinstance(cset, EuclideanBall):
        w = z - cset.center
        if np.linalg.norm(y - cset.center) <= cset.radius or not np.any(w):
            return np.eye(m) if np.any(w) or cset.radius > 0 else np.zeros((m, m))
        lam = -(w @ (metric.R @ (z - y))) / (w @ w)
        K = np.zeros((m + 1, m + 1))
        K[:m, :m] = metric.R + lam * np.eye(m)
        K[:m, m] = w
        K[m, :m] = w
        rhs = np.zeros((m + 1, m))
        rhs[:m] = metric.R
        return np.linalg.solve(K, rhs)[:m]
    A = cset.active_normals(z, y, metric)
    if A.shape[0] == 0:
        return np.eye(m)
    RiA = metric.Rinv @ A.T
    return np.eye(m) - RiA @ np.linalg.solve(A @ RiA, A)


def _control_preimage(R, B, D, p, q):
    rhs = np.atleast_2d(p) @ B + np.atleast_2d(q) @ D
    return -np.linalg.solve(R, rhs.T).T


def phi2(spec, t, p2, q2):
    """Follower pointwise optimizer ``P_Γ2[-R2⁻¹(B2ᵀp2 + D2ᵀq2)]``."""
    c = spec.coeffs(t)
    single = np.ndim(p2) == 1
    out = project(spec.gamma2, c.metric2, _control_preimage(c.R2, c.B2, c.D2, p2, q2))
    return out[0] if single else out


def phi1(spec, t, p1, q1):
    """Leader pointwise optimizer ``P_Γ1[-R1⁻¹(B1ᵀp1 + D1ᵀq1)]``."""
    c = spec.coeffs(t)
    single = np.ndim(p1) == 1
    out = project(spec.gamma1, c.metric1, _control_preimage(c.R1, c.B1, c.D1, p1, q1))
    return out[0] if single else out
