"""JSON config documents <-> GameSpec plus solver and simulation settings."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import MalformedSpec
from .model import COEFF_NAMES, GameSpec, PiecewiseConstant
from .projection import FullSpace, set_from_dict


@dataclass
class SolverSettings:
    N: int = 8
    tol: float = 1e-10
    continuation_steps: int = 8
    K_gain: float = 0.5
    riccati_grid: int = 1000
    max_iter: int = 500


@dataclass
class SimulationSettings:
    paths: int = 10000
    steps: int = 100
    seed: int = 0
    antithetic: bool = False


def _matrix(val, shape, name):
    try:
        M = np.array(val, dtype=float)
    except (TypeError, ValueError):
        raise MalformedSpec(f"{name} is not a numeric array") from None
    if M.ndim == 0 and shape == (1, 1):
        M = M.reshape(1, 1)
    if M.ndim == 1 and shape[1] == 1 and M.size == shape[0]:
        M = M.reshape(shape)
    if M.ndim == 1 and shape[0] == 1 and M.size == shape[1]:
        M = M.reshape(shape)
    if M.shape != shape:
        raise MalformedSpec(f"{name} has shape {M.shape}, expected {shape}")
    return M


def _coefficient(val, shape, name):
    if isinstance(val, list) and val and isinstance(val[0], dict):
        try:
            breaks = [float(p["t_from"]) for p in val]
            mats = [_matrix(p["matrix"], shape, name) for p in val]
        except KeyError as exc:
            raise MalformedSpec(f"{name} breakpoint is missing {exc}") from None
        return PiecewiseConstant(breaks, np.stack(mats))
    return PiecewiseConstant.constant(_matrix(val, shape, name))


def _shapes(n, m1, m2):
    return {"A": (n, n), "C": (n, n), "B1": (n, m1), "D1": (n, m1), "B2": (n, m2),
            "D2": (n, m2), "Q1": (n, n), "Q2": (n, n), "R1": (m1, m1), "R2": (m2, m2)}


def parse_document(doc):
    """Return ``(spec, SolverSettings, SimulationSettings)``; raises MalformedSpec."""
    if not isinstance(doc, dict):
        raise MalformedSpec("config must be a JSON object")
    try:
        dims = doc["dimensions"]
        n, m1, m2 = int(dims["n"]), int(dims["m1"]), int(dims["m2"])
        T = float(doc["horizon"])
        x0 = _matrix(doc["x0"], (n, 1), "x0").ravel()
        coef = doc["coefficients"]
        term = doc["terminal"]
    except KeyError as exc:
        raise MalformedSpec(f"config is missing {exc}") from None
    except (TypeError, ValueError) as exc:
        raise MalformedSpec(f"bad config field: {exc}") from None
    if min(n, m1, m2) < 1:
        raise MalformedSpec("dimensions must be positive")
    if not np.isfinite(T) or T <= 0:
        raise MalformedSpec("horizon must be positive")
    shapes = _shapes(n, m1, m2)
    mats = {}
    for name in COEFF_NAMES:
        if name not in coef:
            raise MalformedSpec(f"coefficient {name} is missing")
        mats[name] = _coefficient(coef[name], shapes[name], name)
    for name in ("Phi1", "Phi2"):
        if name not in term:
            raise MalformedSpec(f"terminal weight {name} is missing")
        mats[name] = _matrix(term[name], (n, n), name)
    cons = doc.get("constraints", {})
    g1 = set_from_dict(cons["gamma1"], m1) if "gamma1" in cons else FullSpace(m1)
    g2 = set_from_dict(cons["gamma2"], m2) if "gamma2" in cons else FullSpace(m2)
    spec = GameSpec(n, m1, m2, T, x0, gamma1=g1, gamma2=g2, **mats)
    solver = _settings(SolverSettings, doc.get("solver", {}), "solver")
    sim = _settings(SimulationSettings, doc.get("simulation", {}), "simulation")
    return spec, solver, sim


def _settings(cls, section, label):
    if not isinstance(section, dict):
        raise MalformedSpec(f"{label} section must be an object")
    base = cls()
    out = {}
    for key, val in section.items():
        if not hasattr(base, key):
            raise MalformedSpec(f"unknown {label} setting {key!r}")
        typ = type(getattr(base, key))
        try:
            out[key] = typ(val)
        except (TypeError, ValueError):
            raise MalformedSpec(f"{label}.{key} has the wrong type") from None
    return cls(**out)


def load_config(path):
    """Read a config file; ``OSError`` propagates for the caller to map."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedSpec(f"config is not valid JSON: {exc}") from None
    return parse_document(doc)


def _encode_coefficient(pc):
    if pc.is_constant():
        return pc.values[0].tolist()
    return [{"t_from": float(t), "matrix": M.tolist()} for t, M in zip(pc.breaks, pc.values)]


def spec_to_document(spec, solver=None, simulation=None):
    doc = {
        "dimensions": {"n": spec.n, "m1": spec.m1, "m2": spec.m2},
        "horizon": float(spec.T),
        "x0": spec.x0.tolist(),
        "coefficients": {k: _encode_coefficient(getattr(spec, k)) for k in COEFF_NAMES},
        "terminal": {"Phi1": spec.Phi1.tolist(), "Phi2": spec.Phi2.tolist()},
        "constraints": {"gamma1": spec.gamma1.to_dict(), "gamma2": spec.gamma2.to_dict()},
    }
    if solver is not None:
        doc["solver"] = asdict(solver)
    if simulation is not None:
        doc["simulation"] = asdict(simulation)
    return doc


def specs_equal(a, b):
    """Field-exact comparison of two game specifications."""
    if (a.n, a.m1, a.m2, a.T) != (b.n, b.m1, b.m2, b.T):
        return False
    if not (np.array_equal(a.x0, b.x0) and np.array_equal(a.Phi1, b.Phi1)
            and np.array_equal(a.Phi2, b.Phi2)):
        return False
    for k in COEFF_NAMES:
        pa, pb = getattr(a, k), getattr(b, k)
        if not (np.array_equal(pa.breaks, pb.breaks) and np.array_equal(pa.values, pb.values)):
            return False
    return a.gamma1 == b.gamma1 and a.gamma2 == b.gamma2
