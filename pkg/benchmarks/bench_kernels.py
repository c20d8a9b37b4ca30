"""Times each hot kernel under numba and under the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Inputs are sized like one desk-scale training step.
"""
import argparse
import time

import numpy as np

from radcamfuse import kernels


def workloads(rng):
    fmap = rng.normal(size=(128, 128, 16))
    coords = rng.uniform(-2, 130, size=(20000, 2))
    gout = rng.normal(size=(20000, 16))
    src = rng.normal(size=(20000, 32))
    seg = rng.integers(0, 4096, 20000)
    boxes = np.concatenate([rng.uniform(0, 25, (300, 2)), rng.uniform(0.5, 5, (300, 2)),
                            rng.uniform(-3, 3, (300, 1))], 1)
    scores = rng.uniform(size=300)
    pts = rng.normal(size=(2000, 3))
    starts = np.arange(0, 2001, 50)
    h = rng.uniform(0.1, 0.5, len(starts) - 1)
    boxes7 = np.concatenate([rng.uniform(0, 25, (64, 3)), rng.uniform(0.5, 5, (64, 3)), rng.uniform(-3, 3, (64, 1))], 1)
    cloud = rng.uniform(0, 25, (1000, 3))
    return {
        "bilinear_gather": (fmap, coords),
        "bilinear_gather_grad": (fmap, coords, gout),
        "scatter_add": (src, seg, 4096),
        "segment_max": (src, seg, 4096),
        "bev_intersection_matrix": (boxes[:100], boxes),
        "nms": (boxes, scores, 0.5),
        "kde": (pts, starts, h),
        "points_in_boxes": (cloud, boxes7),
    }


def best_time(fn, args, repeat):
    fn(*args)  # warm-up (numba compiles here)
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        ts.append(time.perf_counter() - t0)
    return min(ts)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    loads = workloads(np.random.default_rng(0))
    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, args in loads.items():
        t_np = best_time(getattr(kernels.numpy_impl, name), args, a.repeat)
        if kernels.numba_impl is None:
            print(f"{name:<26} {t_np * 1e3:>10.3f} {'n/a':>10}")
            continue
        t_nb = best_time(getattr(kernels.numba_impl, name), args, a.repeat)
        print(f"{name:<26} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
