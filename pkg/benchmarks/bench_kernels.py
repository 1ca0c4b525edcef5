"""Time the numba kernels against their numpy twins.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Run with LESIONFORGE_NO_NUMBA=1 to confirm the numpy path works on its own;
only the numpy column is printed then.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from lesionforge import _kernels as k
from lesionforge._accel import backend


def random_boxes(rng, n, dim3):
    xy = rng.uniform(0, 480, (n, 2))
    wh = rng.uniform(2, 40, (n, 2))
    cols = [xy, xy + wh]
    if dim3:
        z1 = rng.integers(0, 100, (n, 1)).astype(np.float64)
        cols += [z1, z1 + rng.integers(0, 10, (n, 1))]
    return np.hstack(cols)


def cases(rng):
    a2, b2 = random_boxes(rng, 400, False), random_boxes(rng, 400, False)
    a3, b3 = random_boxes(rng, 400, True), random_boxes(rng, 400, True)
    plane = rng.normal(size=(512, 512))
    return [
        ("overlap_2d 400x400", lambda: k.overlap_2d_numpy(a2, b2, k.IOU),
         k.overlap_2d_numba and (lambda: k.overlap_2d_numba(a2, b2, k.IOU))),
        ("overlap_3d 400x400", lambda: k.overlap_3d_numpy(a3, b3, k.IOU),
         k.overlap_3d_numba and (lambda: k.overlap_3d_numba(a3, b3, k.IOU))),
        ("resize 512->800", lambda: k.resize_numpy(plane, 800, 800),
         k.HAS_NUMBA and (lambda: k.resize_numba(plane, 800, 800))),
    ]


def best_ms(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    return 1000 * min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    print(f"backend: {backend()}")
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, np_fn, nb_fn in cases(np.random.default_rng(0)):
        t_np = best_ms(np_fn, args.repeat)
        if nb_fn:
            assert np.allclose(np_fn(), nb_fn())
            t_nb = best_ms(nb_fn, args.repeat)
            print(f"{name:<22}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>8.1f}x")
        else:
            print(f"{name:<22}{t_np:>10.2f}{'-':>10}{'-':>9}")


if __name__ == "__main__":
    main()
