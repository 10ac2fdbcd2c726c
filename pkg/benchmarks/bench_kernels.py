"""Time the compiled kernels against the numpy fallback on experiment-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is also checked for agreement between backends before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from ssm_peft import kernels


def cases(rng, B=1, D=64, H=8, N=200):
    abar = rng.uniform(0.5, 0.999, (D, H))
    bc = rng.normal(size=(D, H))
    kern = rng.normal(size=(D, N))
    x = rng.normal(size=(B, D, N))
    g = rng.normal(size=(B, D, N))
    a4 = rng.uniform(0.5, 0.999, (B, N, D, H))
    u4 = rng.normal(size=(B, N, D, H))
    h0 = rng.normal(size=(B, D, H))
    hs = kernels.diag_scan(a4, u4, h0, impl=kernels.implementations()["python"])
    g4 = rng.normal(size=(B, N, D, H))
    return {
        "ssm_kernel": ("ssm_kernel", (abar, bc, N)),
        "ssm_kernel_backward": ("ssm_kernel_backward", (abar, bc, N, kern)),
        "causal_conv": ("causal_conv", (kern, x)),
        "causal_conv_backward": ("causal_conv_backward", (kern, x, g)),
        "diag_scan": ("diag_scan", (a4, u4, h0)),
        "diag_scan_backward": ("diag_scan_backward", (a4, hs, h0, g4)),
    }


def _flat(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.ravel(p) for p in parts])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled extension not built; only the fallback is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    results = []
    print(f"{'kernel':<22}" + "".join(f"{n:>12}" for n in impls) + f"{'speedup':>10}{'max diff':>11}")
    for name, (fn, call_args) in cases(rng).items():
        f = getattr(kernels, fn)
        times, outs = {}, {}
        for iname, impl in impls.items():
            outs[iname] = _flat(f(*call_args, impl=impl))
            number = max(1, int(0.2 / max(timeit.timeit(lambda: f(*call_args, impl=impl), number=1), 1e-6)))
            t = min(timeit.repeat(lambda: f(*call_args, impl=impl), number=number, repeat=args.repeat)) / number
            times[iname] = t
        diff = float(np.max(np.abs(outs["python"] - outs.get("cython", outs["python"]))))
        speed = times["python"] / times["cython"] if "cython" in times else 1.0
        results.append({"kernel": name, "seconds": times, "speedup": speed, "max_abs_diff": diff})
        print(f"{name:<22}" + "".join(f"{times[n] * 1e3:>10.3f}ms" for n in impls) + f"{speed:>9.1f}x{diff:>11.1e}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"backend": kernels.BACKEND, "results": results}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
