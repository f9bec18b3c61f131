"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]

Each kernel is run once to trigger compilation, then timed over N repeats;
the table reports the best wall time per call for both backends and checks
that they agree.
"""

import argparse
import math
import time

import numpy as np

from cissbench import _accel, kernels
from cissbench.taskstream import SyntheticSceneConfig, generate_synthetic_dataset


def best_of(fn, repeats):
    fn()
    best = math.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    truth = rng.integers(0, 7, size=(256, 64, 64), dtype=np.uint8)
    truth[rng.random(truth.shape) < 0.05] = 255
    pred = rng.integers(0, 7, size=truth.shape, dtype=np.uint8)
    lut = np.arange(256, dtype=np.uint8)
    lut[5:7] = 0

    def paint(nb):
        img = np.zeros((64, 64, 3), np.float32)
        lab = np.zeros((64, 64), np.uint8)
        rgb = np.array([0.9, 0.2, 0.1], np.float32)
        fn = kernels.paint_shape_nb if nb else kernels.paint_shape_np
        for k in range(200):
            fn(img, lab, k % 6, 32.0, 32.0, 10.0, 0.7, math.cos(0.3 * k), math.sin(0.3 * k), 1 + k % 6, rgb)
        return img, lab

    return {
        "confusion_counts": (lambda: kernels.confusion_counts_nb(truth, pred, 7, 255),
                             lambda: kernels.confusion_counts_np(truth, pred, 7, 255)),
        "remap_labels": (lambda: kernels.remap_labels_nb(truth, lut), lambda: kernels.remap_labels_np(truth, lut)),
        "class_pixel_counts": (lambda: kernels.class_pixel_counts_nb(truth),
                               lambda: kernels.class_pixel_counts_np(truth)),
        "paint_shape x200": (lambda: paint(True), lambda: paint(False)),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, (nb, np_) in cases(rng).items():
        t_nb, t_np = best_of(nb, args.repeats), best_of(np_, args.repeats)
        print(f"{name:<22}{1e3 * t_nb:>10.2f}{1e3 * t_np:>10.2f}{t_np / t_nb:>9.1f}  {same(nb(), np_())}")

    # End to end: dataset generation under each backend.
    cfg = SyntheticSceneConfig(num_train=200, num_val=20, num_test=20)
    timings = {}
    for flag in (True, False):
        _accel.USE_NUMBA = flag
        t = time.perf_counter()
        generate_synthetic_dataset(cfg)
        timings[flag] = time.perf_counter() - t
    _accel.USE_NUMBA = _accel.NUMBA_AVAILABLE
    print(f"{'generate 240 images':<22}{1e3 * timings[True]:>10.1f}{1e3 * timings[False]:>10.1f}"
          f"{timings[False] / timings[True]:>9.1f}")


if __name__ == "__main__":
    main()
