"""Compare the numba and numpy FastICA kernels on bootstrap-sized problems.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.  Both backends
are imported directly, so the MBLINGAM_DISABLE_NUMBA flag has no effect here.
"""
import argparse
import time

import numpy as np

from mblingam import kernels
from mblingam.lingam import GAUSS_MOMENTS, restart_inits
from mblingam.simulate import generate_dataset, six_variable_model, two_variable_model

CASES = [
    ("m=2 n=1000", two_variable_model(0.8), 1000),
    ("m=2 n=9000", two_variable_model(0.8), 9000),
    ("m=6 n=1000", six_variable_model(0.8), 1000),
]


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    gref = GAUSS_MOMENTS["tanh"][0]
    print(f"{'case':<12} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8} {'max |dW|':>10}")
    for label, b, n in CASES:
        data = generate_dataset(b, n, seed=1, allow_cyclic=True)
        values = np.ascontiguousarray(data.values)
        idx = np.random.default_rng(2).integers(0, data.n, size=n)
        inits = restart_inits(3, 8, data.m)
        call = (values, idx, inits, 1000, 1e-7, kernels.TANH, gref)

        kernels.fit_unmixing_nb(*call)  # compile outside the timed region
        t_np = _time(lambda: kernels.fit_unmixing_np(*call), args.repeat)
        t_nb = _time(lambda: kernels.fit_unmixing_nb(*call), args.repeat)
        w_np = kernels.fit_unmixing_np(*call)[1]
        w_nb = kernels.fit_unmixing_nb(*call)[1]
        diff = np.abs(w_np - w_nb).max()
        print(f"{label:<12} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} {t_np / t_nb:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
