"""Time the compiled path kernel against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--paths 20000] [--steps 200] [--repeat 3]
"""

import argparse
import time

import numpy as np

from stackgame import GameSpec, _kernels_py, riccati, simulate

try:
    from stackgame import _kernels as compiled
except ImportError:
    compiled = None


def setup(steps):
    spec = GameSpec.scalar(T=0.3, x0=1.0, A=0.2, B1=1, B2=0.5, C=0.3, D1=0.2, D2=0.1,
                           Q1=1, Q2=0.5, Phi1=1, Phi2=0.5)
    aug = riccati.build_augmented(spec)
    ric = riccati.solve_riccati(aug, grid=1000)
    strat = simulate.riccati_strategy(spec, ric, aug, steps)
    F, f, G, g = strat.closed_loop(spec)
    (W1, w1, c1), (W2, w2, c2), P1, P2 = strat.cost_weights(spec)
    return spec, (strat.X0, F, f, G, g, W1, w1, c1, W2, w2, c2, P1, P2)


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=20000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    spec, data = setup(args.steps)
    dt = spec.T / args.steps
    dW = np.random.default_rng(0).standard_normal((args.paths, args.steps)) * np.sqrt(dt)
    t_py, (J_py, _) = best_of(lambda: _kernels_py.affine_paths(*data, dW, dt), args.repeat)
    print(f"numpy     {t_py:8.4f} s  ({args.paths} paths x {args.steps} steps)")
    if compiled is None:
        print("compiled  not built")
        return
    t_c, (J_c, _) = best_of(lambda: compiled.affine_paths(*data, dW, dt), args.repeat)
    print(f"compiled  {t_c:8.4f} s  speedup {t_py / t_c:5.1f}x  max |dJ| {np.max(np.abs(J_py - J_c)):.2e}")


if __name__ == "__main__":
    main()
