"""Time the numba and numpy paths of each hot kernel side by side.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 64]
"""
import argparse
import timeit

import numpy as np

from fedsb import kernels
from fedsb._accel import HAVE_NUMBA


def cases(size: int, rng):
    a = rng.standard_normal((size, size // 2))
    g = rng.standard_normal((256, size * 8))
    return {
        "jacobi_rotate": (kernels._jacobi_rotate_nb, kernels._jacobi_rotate_np, (a,)),
        "clip_rows": (kernels._clip_rows_nb, kernels._clip_rows_np, (g, 1.0)),
        "log_a_int": (kernels._log_a_int_nb, kernels._log_a_int_np, (0.01, 1.0, 32)),
        "log_a_frac": (kernels._log_a_frac_nb, kernels._log_a_frac_np, (0.01, 1.0, 12.25)),
    }


def best_of(fn, args, repeat: int) -> float:
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<14}{'numba (us)':>12}{'numpy (us)':>12}{'speedup':>10}")
    for name, (nb, np_, fargs) in cases(args.size, rng).items():
        nb(*fargs)  # compile outside the timed region
        t_nb = best_of(nb, fargs, args.repeat)
        t_np = best_of(np_, fargs, args.repeat)
        print(f"{name:<14}{t_nb * 1e6:>12.1f}{t_np * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
