#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy fallbacks.

Run: python benchmarks/bench_kernels.py [--seconds 60] [--params 500000]

The two backends accumulate in the same order, so results are checked for
exact equality before timing.  Set UATR_NUMBA=0 to verify the package still
runs (more slowly) without numba.
"""

import argparse
import time

import numpy as np

from uatr import kernels
from uatr.audio import resample, AudioBuffer


def _time(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_resample(seconds: float):
    rng = np.random.default_rng(0)
    n = int(seconds * 44100)
    x = rng.uniform(-1, 1, n)
    up, down, h = 160, 441, 89
    taps = rng.standard_normal((up, 2 * h + 1))
    xpad = np.zeros(n + 2 * h)
    xpad[h:h + n] = x
    out_len = (2 * n * up + down) // (2 * down)

    def run(core):
        out = np.empty(out_len)
        core(xpad, taps, up, down, 2 * h, out)
        return out

    results = {}
    times = {}
    for name, core in (("numba", kernels._resample_numba),
                       ("numpy", kernels._resample_numpy)):
        if core is None:
            continue
        run(core)  # warm up / compile
        times[name] = _time(lambda c=core: run(c))
        results[name] = run(core)
    if len(results) == 2:
        assert np.array_equal(results["numba"], results["numpy"]), \
            "backends diverged"
    return times


def bench_adamw(n_params: int):
    rng = np.random.default_rng(0)
    base = [rng.standard_normal(n_params).astype(np.float32),
            rng.standard_normal(n_params).astype(np.float32),
            rng.standard_normal(n_params).astype(np.float32) * 0.1,
            np.abs(rng.standard_normal(n_params)).astype(np.float32) * 0.01]
    f = np.float32

    def run(core):
        p, g, m, v = (a.copy() for a in base)
        core(p, g, m, v, f(0.9), f(0.999), f(0.1), f(0.001),
             f(1.0), f(1.0), f(1e-3), f(1e-8), f(0.01))
        return p

    times = {}
    results = {}
    for name, core in (("numba", kernels._adamw_numba),
                       ("numpy", kernels._adamw_numpy)):
        if core is None:
            continue
        run(core)
        times[name] = _time(lambda c=core: run(c))
        results[name] = run(core)
    if len(results) == 2:
        assert np.array_equal(results["numba"], results["numpy"]), \
            "backends diverged"
    return times


def bench_end_to_end_resample(seconds: float):
    rng = np.random.default_rng(1)
    buf = AudioBuffer(rng.uniform(-1, 1, int(seconds * 44100)), 44100)
    resample(buf, 16000)  # warm up
    return _time(lambda: resample(buf, 16000), repeats=3)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seconds", type=float, default=60.0,
                        help="audio length for the resampler benchmark")
    parser.add_argument("--params", type=int, default=500_000,
                        help="tensor size for the optimizer benchmark")
    args = parser.parse_args()

    print(f"active backend: {kernels.backend()}")
    print(f"\nresample kernel ({args.seconds:.0f} s of 44.1 kHz -> 16 kHz):")
    for name, t in bench_resample(args.seconds).items():
        print(f"  {name:6s} {t * 1e3:9.1f} ms")
    print(f"\nadamw update ({args.params:,} float32 parameters):")
    for name, t in bench_adamw(args.params).items():
        print(f"  {name:6s} {t * 1e3:9.1f} ms")
    t = bench_end_to_end_resample(args.seconds)
    print(f"\nresample() end to end via active backend: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
