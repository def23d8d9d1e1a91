"""The ten acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import json
import os
import time

import numpy as np
import pytest

from stackgame import (Box, EuclideanBall, FullSpace, GameSpec, Halfspace, Interval, Lattice,
                       NonnegativeOrthant, NotConverged, project)
from stackgame import aclm, fbsde, oracle, riccati, simulate
from stackgame.cli import run, solve_aol
from stackgame.config import load_config

from conftest import config_path

RESULTS = []


def report(number, title, ok, detail, started):
    line = f"acceptance {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail} ({time.time() - started:.1f}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _quad(D, R):
    return np.einsum("pi,ij,pj->p", D, R, D)


def test_01_projection_laws():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    sets = [FullSpace(2), Box([-1.0, 0.0], [0.5, 2.0]), NonnegativeOrthant(2), Interval(-0.5, 0.3),
            EuclideanBall([0.3, -0.2], 0.7), Halfspace([1.0, -2.0], 0.4)]
    worst = {}
    for cset in sets:
        m = cset.dim
        w = 0.0
        for r in range(20):  # 20 metrics x 500 pairs = 10^4 samples per set
            L = rng.normal(size=(m, m))
            R = L @ L.T + 0.2 * np.eye(m)
            if r % 4 == 0:
                R = np.diag(np.diag(R))
            elif r % 4 == 1:
                R = 1.7 * np.eye(m)
            X, Y = 3 * rng.normal(size=(500, m)), 3 * rng.normal(size=(500, m))
            PX, PY = project(cset, R, X), project(cset, R, Y)
            idem = np.max(np.abs(project(cset, R, PX) - PX))
            nonexp = np.max(np.sqrt(_quad(PX - PY, R)) - np.sqrt(_quad(X - Y, R)))
            firm = np.max(_quad(PX - PY, R) - np.einsum("pi,ij,pj->p", PX - PY, R, X - Y))
            vi = np.max(np.einsum("pi,ij,pj->p", PX - X, R, PX - cset.sample(rng, 500)))
            w = max(w, idem, nonexp, firm, vi)
        worst[cset.kind] = w
    ok = max(worst.values()) <= 1e-10 and time.time() - t0 < 10
    report(1, "projection laws", ok, f"max residual {max(worst.values()):.2e} over {len(sets)} set kinds", t0)


def test_02_unconstrained_duality():
    t0 = time.time()
    spec, _, _ = load_config(config_path("fullspace"))
    aug = riccati.build_augmented(spec)
    ric = riccati.solve_riccati(aug, grid=1000)
    errs = {N: max(riccati.duality_errors(spec, aug, ric, fbsde.solve_leader_system(spec, Lattice(spec.T, N))))
            for N in (4, 8, 16)}
    r1, r2 = errs[4] / errs[8], errs[8] / errs[16]
    ok = r1 >= 1.8 and r2 >= 1.8 and errs[16] <= 0.05 and time.time() - t0 < 30
    report(2, "unconstrained duality", ok,
           f"errors {errs[4]:.4f}/{errs[8]:.4f}/{errs[16]:.4f}, ratios {r1:.2f}/{r2:.2f}", t0)


def test_03_symmetrization():
    t0 = time.time()
    spec = GameSpec.scalar(T=0.5, x0=1.0, A=0.1, B1=0.8, B2=0.8, C=0.2, D1=0.3, D2=0.3,
                           Q1=1.0, Q2=1.0, Phi1=0.5, Phi2=0.5, R1=2.0, R2=2.0)
    ut = riccati.upsilon_transform(spec)
    sym = riccati.solve_symmetrized_riccati(ut, grid=2000)
    direct = riccati.solve_riccati(riccati.build_augmented(spec), grid=2000)
    asym = ut.max_asymmetry()
    gap = float(np.max(np.abs(sym.R - direct.R)))
    ok = ut.lam == 1.0 and ut.mu == 1.0 and asym <= 1e-12 and gap <= 1e-8 and time.time() - t0 < 5
    report(3, "symmetrized Riccati", ok, f"asymmetry {asym:.1e}, sup |UR_bar - R| {gap:.1e}", t0)


def test_04_single_player_cross_check():
    t0 = time.time()
    lqr = riccati.solve_tang_riccati(0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.5, 1000, T=1.0)
    e_lqr = abs(lqr.K[0][0, 0] - np.tanh(1.0 + np.arctanh(0.5)))
    worst = 0.0
    for name in ("scalar", "continuation"):
        spec, _, _ = load_config(config_path(name))
        N = 64
        lin = fbsde.linear_lattice_solution(spec, N, system="follower")
        tang = riccati.solve_tang_riccati(spec.A(0), spec.B2(0), spec.C(0), spec.D2(0), spec.Q2(0),
                                          spec.R2(0), spec.Phi2, 64 * N, T=spec.T)
        dt = spec.T / N
        gap = max(abs(lin.Kv[i][0, 0] - tang.gain_at(i * dt)[0, 0]) for i in range(N))
        worst = max(worst, gap / dt)
    ok = e_lqr <= 1e-8 and worst <= 2.0 and time.time() - t0 < 20
    report(4, "single-player Riccati", ok, f"LQR error {e_lqr:.1e}, max gain gap {worst:.2f} dt", t0)


def test_05_oracle_equivalence():
    t0 = time.time()
    spec, solver, _ = load_config(config_path("constrained_n3"))
    lat = Lattice(spec.T, solver.N)
    sol = fbsde.solve_leader_system(spec, lat)
    um, vm = oracle.from_layers(sol.u.layers), oracle.from_layers(sol.v.layers)
    J1, J2 = fbsde.solution_costs(spec, sol)
    lead = oracle.oracle_leader(spec, lat, restarts=4)
    foll = oracle.oracle_follower(spec, lat, sol.u)
    dctl = max(np.max(np.abs(um - lead.u)), np.max(np.abs(vm - lead.v)), np.max(np.abs(vm - foll.v)))
    dJ = max(abs(J1 - lead.J1), abs(J2 - foll.J2))
    same = (oracle.clamped_nodes(spec.gamma1, um, 1) == oracle.clamped_nodes(spec.gamma1, lead.u, 1)
            and oracle.clamped_nodes(spec.gamma2, vm, 1) == oracle.clamped_nodes(spec.gamma2, foll.v, 1))
    mixed = 0 < sol.clamped_fraction < 1
    no_better = all(r["J1"] is None or J1 <= r["J1"] + 1e-6 for r in lead.restarts)
    ok = dctl <= 1e-4 and dJ <= 1e-6 and same and mixed and no_better and time.time() - t0 < 60
    report(5, "oracle equivalence", ok,
           f"control delta {dctl:.1e}, cost delta {dJ:.1e}, clamped sets equal {same}", t0)


def _fixture_solutions(names=("scalar", "fullspace", "constrained_n3", "continuation", "aclm")):
    for name in names:
        spec, solver, sim = load_config(config_path(name))
        lat = Lattice(spec.T, solver.N)
        yield name, spec, lat, sim, solve_aol(spec, lat, solver)


def test_06_max_principle_residuals():
    t0 = time.time()
    worst_r = worst_v = 0.0
    for _, spec, lat, _, sol in _fixture_solutions():
        rep = fbsde.max_principle_residual(spec, lat, sol, probes=32)
        worst_r = max(worst_r, rep.max_residual)
        worst_v = max(worst_v, rep.max_violation)
    ok = worst_r <= 1e-8 and worst_v <= 1e-8
    report(6, "maximum-principle residuals", ok,
           f"max projection residual {worst_r:.1e}, max probe violation {worst_v:.1e}", t0)


def test_07_continuation():
    t0 = time.time()
    spec, solver, _ = load_config(config_path("continuation"))
    lat = Lattice(spec.T, solver.N)
    try:
        fbsde.solve_leader_system(spec, lat, max_iter=500)
        picard_failed, grew = False, False
    except NotConverged as exc:
        picard_failed = True
        h = exc.history
        grew = h[-1] >= min(h) and h[-1] > h[0]
    sol = fbsde.solve_by_continuation(spec, lat, "leader", steps=8)
    ok = picard_failed and grew and sol.residual <= 1e-10 and max(sol.level_ratios) < 1
    report(7, "continuation robustness", ok,
           f"Picard failed {picard_failed}, continuation residual {sol.residual:.1e}, "
           f"max level ratio {max(sol.level_ratios):.3f}", t0)


def test_08_closed_loop_leader():
    t0 = time.time()
    spec, solver, sim = load_config(config_path("aclm"))
    sol = aclm.solve_aclm(spec, Lattice(spec.T, solver.N), solver.K_gain)
    recon = aclm.reconstruction_residual(spec, sol)
    bound = max(float(np.max(np.abs(a))) for a in sol.u2.layers)
    h3 = aclm.h3_stationarity_check(spec, sol).max_residual
    cfg = simulate.SimConfig(paths=sim.paths, steps=sim.steps, seed=sim.seed)
    est = simulate.simulate_costs(spec, simulate.aclm_strategy(spec, sol, sim.steps), cfg)
    best = simulate.grid_search_constant_affine(spec, solver.K_gain, sim.steps)
    ref = simulate.simulate_costs(spec, simulate.constant_affine_strategy(spec, sim.steps, best["u2"], best["u1"]), cfg)
    se = np.hypot(est.J1_se, ref.J1_se)
    ok = (recon <= 1e-8 and bound <= solver.K_gain and h3 <= 1e-8 and est.J1 <= ref.J1 + 3 * se
          and time.time() - t0 < 120)
    report(8, "closed-loop leader", ok,
           f"reconstruction {recon:.1e}, |u2| <= {bound:.2f}, H3 {h3:.1e}, "
           f"J1 {est.J1:.5f} vs grid best {ref.J1:.5f} (se {se:.1e})", t0)


def test_09_perturbation_optimality():
    t0 = time.time()
    worst = np.inf
    ok = True
    for _, spec, lat, sim, sol in _fixture_solutions(("scalar", "constrained_n3", "continuation", "aclm")):
        cfg = simulate.SimConfig(paths=2, steps=lat.N, seed=sim.seed)
        for role in ("follower", "leader"):
            for eps in (0.01, 0.05):
                rep = simulate.perturbation_probe(spec, sol, cfg, role, trials=64, eps=eps)
                ok = ok and rep.passed
                worst = min(worst, rep.min_delta)
    report(9, "perturbation optimality", ok, f"smallest cost change {worst:.1e}", t0)


def test_10_reproducibility(tmp_path, monkeypatch, capsys):
    t0 = time.time()
    outs = []
    for threads in ("1", "2", "8"):
        monkeypatch.setenv("STACKGAME_THREADS", threads)
        d = tmp_path / f"t{threads}"
        assert run(["simulate", "--config", config_path("scalar"), "--out", str(d)]) == 0
        with open(d / "estimate.json", "rb") as fh:
            outs.append(fh.read())
    capsys.readouterr()
    ok = outs[0] == outs[1] == outs[2] and json.loads(outs[0])["paths"] > simulate.BLOCK
    report(10, "reproducibility", ok, f"byte-identical summaries across 1/2/8 threads: {ok}", t0)
