"""Time the hot kernels under numba and under the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each backend runs in a fresh interpreter because the backend is chosen
once, at import, from PEDATTACK_NUMBA.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

CASES = {
    "im2col_hwc 32x96x96x16 k3": (
        "x = rng.random((32, 96, 96, 16))",
        "k.im2col_hwc(x, 3, 1, 1)"),
    "col2im_hwc 32x96x96x16 k3": (
        "x = rng.random((32, 96, 96, 16)); c = k.im2col_hwc(x, 3, 1, 1)",
        "k.col2im_hwc(c, x.shape, 3, 1, 1)"),
    "maxpool2_hwc 32x96x96x16": (
        "x = rng.random((32, 96, 96, 16))",
        "k.maxpool2_hwc(x)"),
    "maxpool2_hwc_back 32x96x96x16": (
        "x = rng.random((32, 96, 96, 16)); y, a = k.maxpool2_hwc(x)",
        "k.maxpool2_hwc_back(y, a, x.shape)"),
    "bilinear 64x64 tex, 20k samples": (
        "t = rng.random((64, 64, 3)); c = rng.uniform(0, 63, (20000, 2))",
        "k.bilinear(t, c)"),
    "bilinear_back 20k samples": (
        "g = rng.random((20000, 3)); c = rng.uniform(0, 63, (20000, 2))",
        "k.bilinear_back(g, c, (64, 64, 3))"),
}


def run_backend(repeat):
    import numpy as np
    from pedattack import _kernels as k
    out = {"numba": k.USE_NUMBA}
    for name, (setup, stmt) in CASES.items():
        env = {"k": k, "rng": np.random.default_rng(0)}
        exec(setup, env)
        eval(stmt, env)                        # warm-up, triggers compilation
        out[name] = min(timeit.repeat(stmt, globals=env, number=1, repeat=repeat))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(run_backend(args.repeat)))
        return
    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, PEDATTACK_NUMBA=flag)
        proc = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
                              env=env, capture_output=True, text=True, check=True)
        results[flag] = json.loads(proc.stdout.strip().splitlines()[-1])
    if not results["1"]["numba"]:
        print("numba unavailable: both columns use the numpy fallback")
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}")
    for name in CASES:
        a, b = results["1"][name] * 1e3, results["0"][name] * 1e3
        print(f"{name:34s} {a:10.2f} {b:10.2f} {b / a:8.1f}x")


if __name__ == "__main__":
    main()
