"""Time the numba kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run on identical inputs by both paths; outputs are checked for
bitwise equality before timings are reported.  The end-to-end row generates
the default benchmark dataset in a subprocess per path.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mtlsplit import _kernels as K


def _cases():
    seed = np.uint64(42)

    def fill(mod):
        state = getattr(K, f"{mod}_splitmix64_seed")(seed)
        out = np.empty(100_000, np.uint64)
        getattr(K, f"{mod}_xoshiro_fill")(state, out)
        return out

    def shuffle(mod):
        state = getattr(K, f"{mod}_splitmix64_seed")(seed)
        arr = np.arange(10_000, dtype=np.int64)
        getattr(K, f"{mod}_partial_shuffle")(state, arr, 10_000)
        return arr

    def raster(mod):
        return np.stack([getattr(K, f"{mod}_raster_mask")(k, 64, 64, 20.0) for k in range(4)])

    return {"xoshiro_fill 100k": fill, "partial_shuffle 10k": shuffle, "raster_mask 4x64x64": raster}


def _end_to_end(disable: bool) -> float:
    env = dict(os.environ)
    if disable:
        env["MTLSPLIT_DISABLE_NUMBA"] = "1"
    else:
        env.pop("MTLSPLIT_DISABLE_NUMBA", None)
    code = ("import time; from mtlsplit.synth import FactorSpec, generate; generate(FactorSpec(), 0); "
            "t = time.perf_counter(); generate(FactorSpec(), 1); print(time.perf_counter() - t)")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1
    print(f"{'kernel':<24}{'python s':>12}{'numba s':>12}{'speedup':>10}")
    for name, fn in _cases().items():
        assert np.array_equal(fn("py"), fn("nb")), name  # also warms the jit
        t_py = min(timeit.repeat(lambda: fn("py"), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn("nb"), number=1, repeat=args.repeat))
        print(f"{name:<24}{t_py:>12.4f}{t_nb:>12.4f}{t_py / t_nb:>9.0f}x")
    t_py, t_nb = _end_to_end(True), _end_to_end(False)
    print(f"{'generate K=1920':<24}{t_py:>12.4f}{t_nb:>12.4f}{t_py / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
