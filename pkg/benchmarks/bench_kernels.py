"""Time the numba-compiled kernels against their numpy counterparts.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Both paths are called directly (not through the dispatchers), so this
reports the two implementations side by side regardless of
OFFTRACK_DISABLE_NUMBA. The compiled path is skipped when numba is off.
"""

import argparse
import json
import time

import numpy as np

from offtrack import kernels as K
from offtrack._accel import USE_NUMBA


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return min(ts)


def gru_case(T, B, H, dtype, rng):
    gx = rng.normal(size=(T, B, 3 * H)).astype(dtype)
    h0 = np.zeros((B, H), dtype)
    mask = (rng.random((T, B)) > 0.2).astype(dtype)
    w_h = (0.2 * rng.normal(size=(H, 3 * H))).astype(dtype)
    b_h = np.zeros(3 * H, dtype)
    cache = K._gru_forward_numpy(gx, h0, mask, w_h, b_h)
    dout = rng.normal(size=(T, B, H)).astype(dtype)
    dz = np.zeros((B, H), dtype)
    return {
        "gru_forward": (lambda: K._gru_forward_loop(gx, h0, mask, w_h, b_h),
                        lambda: K._gru_forward_numpy(gx, h0, mask, w_h, b_h)),
        "gru_backward": (lambda: K._gru_backward_loop(dout, dz, h0, mask, w_h, *cache),
                         lambda: K._gru_backward_numpy(dout, dz, h0, mask, w_h, *cache)),
    }


def match_case(n, m, rng):
    s = rng.random((n, m))
    v = rng.random((n, m)) > 0.3
    return {"greedy_match": (lambda: K._greedy_match_loop(s, v), lambda: K._greedy_match_numpy(s, v))}


def radius_case(B, M, N, rng):
    dst = rng.uniform(-30, 30, (B, M, 2))
    src = rng.uniform(-30, 30, (B, N, 2))
    ok_d = np.ones((B, M), bool)
    ok_s = np.ones((B, N), bool)

    def numpy_path():
        d2 = ((dst[:, :, None, :] - src[:, None, :, :]) ** 2).sum(-1)
        return (d2 <= 100.0) & ok_d[:, :, None] & ok_s[:, None, :]

    return {"radius_mask": (lambda: K._radius_mask_loop(dst, src, ok_d, ok_s, 10.0), numpy_path)}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write the results here")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    cases = [
        ("T=6 B=32 H=32 f32", gru_case(6, 32, 32, np.float32, rng)),
        ("T=6 B=700 H=32 f32", gru_case(6, 700, 32, np.float32, rng)),
        ("T=21 B=2048 H=32 f32", gru_case(21, 2048, 32, np.float32, rng)),
        ("T=21 B=2048 H=32 f64", gru_case(21, 2048, 32, np.float64, rng)),
        ("8x8", match_case(8, 8, rng)),
        ("60x60", match_case(60, 60, rng)),
        ("B=32 M=1344 N=25", radius_case(32, 1344, 25, rng)),
    ]
    rows = []
    print(f"{'kernel':<14} {'case':<22} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for label, fns in cases:
        for name, (compiled, vectorised) in fns.items():
            t_np = best_of(vectorised, args.repeat)
            t_nb = best_of(compiled, args.repeat) if USE_NUMBA else float("nan")
            rows.append({"kernel": name, "case": label, "numba_s": t_nb, "numpy_s": t_np})
            print(f"{name:<14} {label:<22} {1e3 * t_nb:>10.3f} {1e3 * t_np:>10.3f} {t_np / t_nb:>7.2f}x")
    if not USE_NUMBA:
        print("numba disabled: only the numpy column is meaningful")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": USE_NUMBA, "results": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
