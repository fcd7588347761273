"""Compare the compiled and the numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeats N] [--skip-e2e]

Part one times each kernel on both backends in-process and checks that the
outputs are identical. Part two runs a fixture analysis and an exhaustive
campaign in a subprocess per backend (the backend is chosen at import time,
so ``QNNH_PURE_PYTHON=1`` selects the fallback).
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from qnnharden.kernels import available_backends

E2E = r"""
import json, time
from qnnharden import kernels
from qnnharden.analysis import analyze
from qnnharden.campaign import CampaignConfig, run_campaign
from qnnharden.fixture import build_fixture
fx = build_fixture(42)
t0 = time.perf_counter(); p = analyze(fx.net, fx.train); t1 = time.perf_counter()
run_campaign(fx.net, p, fx.test, CampaignConfig(exhaustive=True, nvf_thresholds=(0.0, 0.1, 0.2))); t2 = time.perf_counter()
print(json.dumps({"backend": kernels.BACKEND, "analyze": t1 - t0, "campaign": t2 - t1}))
"""


def cases(rng):
    x = rng.integers(-128, 128, (1024, 64)).astype(np.int8)
    w = rng.integers(-128, 128, (64, 64)).astype(np.int8)
    b = rng.integers(-5000, 5000, 64).astype(np.int32)
    modes = rng.integers(0, 3, 64).astype(np.uint8)
    xc = rng.integers(-128, 128, (64, 3, 16, 16)).astype(np.int8)
    wc = rng.integers(-128, 128, (8, 3, 3, 3)).astype(np.int8)
    bc = rng.integers(-5000, 5000, 8).astype(np.int32)
    mc = np.zeros(8, dtype=np.uint8)
    xp = rng.integers(-128, 128, (64, 8, 16, 16)).astype(np.int8)
    return {
        "dense 1024x64x64": lambda k: k.dense(x, w, b, 0.0123, modes),
        "conv2d 64x3x16x16, 8x3x3": lambda k: k.conv2d(xc, wc, bc, 0.0071, mc, 1, 1),
        "maxpool2d 64x8x16x16, 2/2": lambda k: k.maxpool2d(xp, 2, 2),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true", help="only time the kernels")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for label, fn in cases(rng).items():
        outs = {name: fn(k) for name, k in backends.items()}
        ref = outs["python"]
        assert all(np.array_equal(o, ref) for o in outs.values()), f"{label}: backends disagree"
        times = {name: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeats)) for name, k in backends.items()}
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<28}" + "".join(f"{1e3 * t:>12.3f}ms" for t in times.values()) + f"{speed:>9.1f}x")

    if args.skip_e2e:
        return 0
    print("\nfixture analysis + exhaustive 3-threshold campaign")
    for name in backends:
        env = dict(os.environ, QNNH_PURE_PYTHON="1" if name == "python" else "0")
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        r = json.loads(out.stdout.strip().splitlines()[-1])
        print(f"  {r['backend']:<8} analyze {r['analyze']:.2f} s, campaign {r['campaign']:.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
