"""Time the geometry kernels with numba and with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each backend runs in its own interpreter because the switch is read at import.
The numba column excludes compilation (one warm-up call per kernel).
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def cases():
    from moralkit import kernels

    rng = np.random.default_rng(0)
    cloud = rng.uniform(-20, 20, (4096, 3))
    coarse = cloud[:256]
    ix, iy = rng.integers(0, 160, 20000), rng.integers(0, 160, 20000)
    lidar = np.column_stack([rng.uniform(0, 50, 20000), rng.uniform(-25, 25, 20000), rng.normal(0, 0.05, 20000)])
    planes = np.column_stack([rng.normal(0, 0.05, (200, 2)), np.ones(200), rng.normal(0, 0.1, 200)])
    boxes = np.column_stack([rng.uniform(0, 50, (64, 2)), rng.uniform(1, 5, (64, 2)), rng.uniform(-3, 3, 64)])
    return {
        "farthest_point_sample 4096->512": lambda: kernels.farthest_point_sample(cloud, 512),
        "ball_query 512 x 4096, k=32": lambda: kernels.ball_query(cloud, cloud[:512], 2.0, 32),
        "knn 4096 x 256, k=3": lambda: kernels.knn(cloud, coarse, 3),
        "pillar_slots 20000 pts": lambda: kernels.pillar_slots(ix, iy, 160, 160, 32),
        "plane_inlier_counts 200 x 20000": lambda: kernels.plane_inlier_counts(lidar, planes, 0.15),
        "bev_iou_matrix 64 x 64": lambda: kernels.bev_iou_matrix(boxes, boxes),
    }


def worker(repeat):
    out = {}
    for name, fn in cases().items():
        fn()
        times = []
        for _ in range(repeat):
            t = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t)
        out[name] = min(times)
    from moralkit._accel import HAS_NUMBA
    return {"numba": HAS_NUMBA, "seconds": out}


def run_backend(no_numba, repeat):
    env = dict(os.environ, MORALKIT_NO_NUMBA="1" if no_numba else "0")
    proc = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(repeat)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the timings here")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.worker:
        print(json.dumps(worker(args.repeat)))
        return 0
    fast, slow = run_backend(False, args.repeat), run_backend(True, args.repeat)
    if not fast["numba"]:
        print("numba is not importable; both columns use the numpy fallback")
    width = max(map(len, slow["seconds"]))
    print(f"{'kernel':<{width}}  {'numba ms':>10}  {'numpy ms':>10}  {'speed-up':>8}")
    for name, t_np in slow["seconds"].items():
        t_nb = fast["seconds"][name]
        print(f"{name:<{width}}  {1e3 * t_nb:10.3f}  {1e3 * t_np:10.3f}  {t_np / t_nb:8.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": fast["seconds"], "numpy": slow["seconds"]}, fh, indent=1, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
