"""Numba vs NumPy timings for the inner loops of evaluation and synthesis.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each kernel is checked for agreement between the two paths before timing.
The first numba call (compilation) is excluded and reported separately.
"""

import argparse
import time

import numpy as np

from estargan import kernels as K


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(quick):
    rng = np.random.default_rng(0)
    n = 200 if quick else 600
    a, b = rng.standard_normal((n, 24)), rng.standard_normal((n + 37, 24))
    cost = K.pairwise_euclidean_numpy(a, b)
    acc = K.dtw_accumulate_numpy(cost)
    frames = rng.standard_normal((4 * n, 1024))
    window = np.hanning(1024)
    phase = np.cumsum(rng.uniform(0.01, 0.1, 16000 * (2 if quick else 6)))
    amps = rng.random((12, phase.size))
    return [
        ("pairwise_euclidean", K.pairwise_euclidean_numba, K.pairwise_euclidean_numpy, (a, b)),
        ("dtw_accumulate", K.dtw_accumulate_numba, K.dtw_accumulate_numpy, (cost,)),
        ("dtw_backtrack", K.dtw_backtrack_numba, K.dtw_backtrack_numpy, (acc,)),
        ("overlap_add", K.overlap_add_numba, K.overlap_add_numpy, (frames, window, 256)),
        ("harmonic_synth", K.harmonic_synth_numba, K.harmonic_synth_numpy, (phase, amps)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller inputs")
    args = ap.parse_args()

    if not K.USE_NUMBA:
        print("numba disabled or missing; both columns time the numpy path")
    print(f"{'kernel':<20}{'compile s':>11}{'numba ms':>11}{'numpy ms':>11}{'speedup':>9}")
    for name, fast, slow, inputs in cases(args.quick):
        t0 = time.perf_counter()
        got = fast(*inputs)
        compile_s = time.perf_counter() - t0
        np.testing.assert_allclose(got, slow(*inputs), atol=1e-9)
        tf = best_of(fast, inputs, args.repeat)
        ts = best_of(slow, inputs, args.repeat)
        print(f"{name:<20}{compile_s:>11.2f}{tf * 1e3:>11.2f}{ts * 1e3:>11.2f}{ts / tf:>8.1f}x")


if __name__ == "__main__":
    main()
