"""Time the compiled and pure-Python kernel backends on identical inputs.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per (kernel, backend) with the best wall time over the
repeats and the speedup of the compiled backend.
"""
import argparse
import timeit

import numpy as np

from dpo3d import _pycore, kernels


def random_boxes(rng: np.random.Generator, n: int, extent: float = 60.0) -> np.ndarray:
    return np.column_stack([
        rng.uniform(0, extent, n), rng.uniform(0, extent, n), rng.uniform(0, 1, n),
        rng.uniform(3, 6, n), rng.uniform(1.5, 2.6, n), rng.uniform(1, 2, n),
        rng.uniform(-np.pi, np.pi, n),
    ])


def cases(rng: np.random.Generator):
    a = random_boxes(rng, 40)
    b = random_boxes(rng, 40)
    # dense clusters make NMS do real suppression work
    dense = random_boxes(rng, 400, extent=20.0)
    cost = rng.uniform(0, 3, size=(30, 30))
    ties = rng.integers(0, 3, size=(30, 30)).astype(float)
    return [
        ("bev_iou_matrix 40x40", lambda m: m.bev_iou_matrix(a, b)),
        ("nms_sorted 400 boxes", lambda m: m.nms_sorted(dense, 0.1)),
        ("hungarian 30x30", lambda m: m.hungarian(cost)),
        ("hungarian 30x30 ties", lambda m: m.hungarian(ties)),
    ]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = kernels.backends()
    if len(mods) < 2:
        print("compiled backend not built; only the python backend is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'backend':9s} {'seconds':>10s} {'speedup':>8s}")
    for name, fn in cases(rng):
        ref = None
        base = None
        for m in mods:
            out = np.asarray(fn(m))
            if ref is None:
                ref = out
            else:
                assert np.allclose(out, ref), f"{name}: backends disagree"
            number = 1 if m is _pycore else 10
            t = min(timeit.repeat(lambda: fn(m), number=number, repeat=args.repeat)) / number
            base = t if m is _pycore else base
            speed = "" if m is _pycore else f"{base / t:7.1f}x"
            print(f"{name:24s} {m.BACKEND:9s} {t:10.6f} {speed:>8s}")


if __name__ == "__main__":
    main()
