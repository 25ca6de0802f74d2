"""Time the numba kernels against their numpy fallbacks.

Each backend runs in its own interpreter because the choice is made at import
time from STOCHSENS_DISABLE_NUMBA. The first numba call (compilation or cache
load) is excluded from the timings.

    python3 benchmarks/bench_backends.py [--repeat 5] [--quick]
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np


def workloads(quick: bool):
    from stochsens import kernels
    from stochsens.core import TimeGrid
    from stochsens.lq import LQSpec, solve_lq
    from stochsens.rng import standard_normals

    rng = np.random.default_rng(1)
    n, m, d = 3, 2, 2
    K = 500 if quick else 2000
    P = 2000 if quick else 10000
    Ks = 200 if quick else 1000
    spec = LQSpec(x0=rng.normal(size=n), A=0.3 * rng.normal(size=(n, n)), B=rng.normal(size=(n, m)),
                  C=0.2 * rng.normal(size=(d, n, n)), D=0.2 * rng.normal(size=(d, n, m)), e=rng.normal(size=n),
                  f=0.3 * rng.normal(size=(d, n)), Q=np.eye(n), N=np.eye(m), M=np.eye(n))
    grid = TimeGrid(1.0, K)
    s = spec.sampled(grid)
    args = (s["A"], s["B"], s["C"], s["D"], s["e"], s["f"], s["Q"], s["N"], s["M"], grid.dt)
    sol = solve_lq(spec, TimeGrid(1.0, Ks))
    Ah, bh, Ch, dh = (np.ascontiguousarray(a) for a in sol.loop.left())
    dW = standard_normals(3, 0, P, Ks * d).reshape(P, Ks, d) * np.sqrt(1.0 / Ks)
    x = kernels.simulate_affine(Ah, bh, Ch, dh, spec.x0, dW, 1.0 / Ks)
    Wq = np.ascontiguousarray(np.broadcast_to(np.eye(n), (Ks, 1, n, n)))
    wq = np.zeros((Ks, 1, n))
    w0q = np.zeros((Ks, 1))
    Wm = np.ascontiguousarray(np.broadcast_to(np.eye(n), (Ks, 3, 1, n, n)))
    wm, w0m = np.zeros((Ks, 3, 1, n)), np.zeros((Ks, 3, 1))
    L = sol.loop
    return {
        "riccati_backward": lambda: kernels.riccati_backward(*args)[0][0].sum(),
        "forward_moments": lambda: kernels.forward_moments(L.Ah, L.bh, L.Ch, L.dh, Wm, wm, w0m, spec.x0,
                                                           1.0 / Ks)[2].sum(),
        "simulate_affine": lambda: kernels.simulate_affine(Ah, bh, Ch, dh, spec.x0, dW, 1.0 / Ks)[:, -1].sum(),
        "quad_paths": lambda: kernels.quad_paths(x, Wq, wq, w0q, 1.0 / Ks).sum(),
        "standard_normals": lambda: standard_normals(11, 0, P // 4, Ks * d).sum(),
    }


def child(repeat: int, quick: bool) -> None:
    from stochsens import backend_name

    out = {"backend": backend_name(), "kernels": {}}
    for name, fn in workloads(quick).items():
        value = float(fn())
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        out["kernels"][name] = {"median_s": statistics.median(times), "checksum": value}
    print(json.dumps(out))


def run_backend(disable: bool, repeat: int, quick: bool) -> dict:
    env = dict(os.environ, STOCHSENS_DISABLE_NUMBA="1" if disable else "0")
    cmd = [sys.executable, __file__, "--child", "--repeat", str(repeat)] + (["--quick"] if quick else [])
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        child(args.repeat, args.quick)
        return 0
    fast = run_backend(False, args.repeat, args.quick)
    slow = run_backend(True, args.repeat, args.quick)
    print(f"{'kernel':<18} {fast['backend']:>10} {slow['backend']:>10} {'speedup':>8}  agree")
    ok = True
    for name, a in fast["kernels"].items():
        b = slow["kernels"][name]
        same = abs(a["checksum"] - b["checksum"]) <= 1e-9 * max(1.0, abs(b["checksum"]))
        ok &= same
        print(f"{name:<18} {a['median_s'] * 1e3:>8.2f}ms {b['median_s'] * 1e3:>8.2f}ms "
              f"{b['median_s'] / a['median_s']:>7.1f}x  {'yes' if same else 'NO'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
